use super::{DiffError, Graph, Real, Tensor, Var};

/// Maximum relative error between an analytic gradient and central differences.
///
/// `f` returns the function value and its analytic gradient at a point. The
/// error per coordinate is `|analytic - numeric| / (|analytic| + 1e-8)`; any
/// failure or non-finite difference counts as infinite error.
pub fn finite_difference_check<T, F>(f: F, point: &Tensor<T>, h: T) -> T
where
    T: Real,
    F: Fn(&Tensor<T>) -> Result<(T, Tensor<T>), DiffError>,
{
    let coords: Vec<usize> = (0..point.len()).collect();
    finite_difference_check_at(f, point, h, &coords)
}

/// [`finite_difference_check`] restricted to a subset of coordinates.
pub fn finite_difference_check_at<T, F>(f: F, point: &Tensor<T>, h: T, coords: &[usize]) -> T
where
    T: Real,
    F: Fn(&Tensor<T>) -> Result<(T, Tensor<T>), DiffError>,
{
    let analytic = match f(point) {
        Ok((_, g)) if g.shape() == point.shape() => g,
        _ => return T::infinity(),
    };
    let two_h = h + h;
    let mut worst = T::zero();
    for &i in coords {
        let mut plus = point.clone();
        plus.data_mut()[i] = plus.data()[i] + h;
        let mut minus = point.clone();
        minus.data_mut()[i] = minus.data()[i] - h;
        let numeric = match (f(&plus), f(&minus)) {
            (Ok((fp, _)), Ok((fm, _))) => (fp - fm) / two_h,
            _ => return T::infinity(),
        };
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / (a.abs() + T::of(1e-8));
        if !err.is_finite() {
            return T::infinity();
        }
        worst = worst.max(err);
    }
    worst
}

/// Adapts a graph builder over one input into the handle expected by
/// [`finite_difference_check`]; the gradient comes from the graph's backward pass.
pub fn graph_function<T, B>(build: B) -> impl Fn(&Tensor<T>) -> Result<(T, Tensor<T>), DiffError>
where
    T: Real,
    B: Fn(&mut Graph<T>, Var) -> Result<Var, DiffError>,
{
    move |x: &Tensor<T>| {
        let mut g = Graph::new();
        let v = g.input("x", x.clone())?;
        let out = build(&mut g, v)?;
        let mut grads = g.backward(out)?;
        let grad = grads.take(v).expect("tracked input");
        Ok((g.value(out).item(), grad))
    }
}
