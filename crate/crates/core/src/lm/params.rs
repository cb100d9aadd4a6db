use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::diff::{Graph, Real, Tensor, Var};
use crate::{Error, Result};

/// Indices of one block's tensors inside [`Parameters`].
#[derive(Debug, Clone, Copy)]
pub struct LayerSlots {
    base: usize,
    n_heads: usize,
}

impl LayerSlots {
    pub fn ln1_gain(&self) -> usize {
        self.base
    }
    pub fn ln1_bias(&self) -> usize {
        self.base + 1
    }
    /// `(wq, wk, wv, wo)` of head `h`.
    pub fn head(&self, h: usize) -> [usize; 4] {
        let b = self.base + 2 + 4 * h;
        [b, b + 1, b + 2, b + 3]
    }
    fn mlp_base(&self) -> usize {
        self.base + 2 + 4 * self.n_heads
    }
    pub fn ln2_gain(&self) -> usize {
        self.mlp_base()
    }
    pub fn ln2_bias(&self) -> usize {
        self.mlp_base() + 1
    }
    pub fn w1(&self) -> usize {
        self.mlp_base() + 2
    }
    pub fn b1(&self) -> usize {
        self.mlp_base() + 3
    }
    pub fn w2(&self) -> usize {
        self.mlp_base() + 4
    }
    pub fn b2(&self) -> usize {
        self.mlp_base() + 5
    }
    pub fn range(&self) -> std::ops::Range<usize> {
        self.base..self.mlp_base() + 6
    }
    pub fn mlp_range(&self) -> std::ops::Range<usize> {
        self.mlp_base() + 2..self.mlp_base() + 6
    }
}

/// Tensor indices for a model shape.
#[derive(Debug, Clone, Copy)]
pub struct ParamLayout {
    n_layers: usize,
    n_heads: usize,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            n_layers: cfg.n_layers,
            n_heads: cfg.n_heads,
        }
    }
    fn per_layer(&self) -> usize {
        2 + 4 * self.n_heads + 6
    }
    pub fn tok_emb(&self) -> usize {
        0
    }
    pub fn pos_emb(&self) -> usize {
        1
    }
    pub fn layer(&self, l: usize) -> LayerSlots {
        LayerSlots {
            base: 2 + l * self.per_layer(),
            n_heads: self.n_heads,
        }
    }
    pub fn ln_f_gain(&self) -> usize {
        2 + self.n_layers * self.per_layer()
    }
    pub fn ln_f_bias(&self) -> usize {
        self.ln_f_gain() + 1
    }
    pub fn unembed(&self) -> usize {
        self.ln_f_gain() + 2
    }
    pub fn len(&self) -> usize {
        self.ln_f_gain() + 3
    }
    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Model weights stored as a flat, ordered list of named tensors.
///
/// Order: `tok_emb`, `pos_emb`, then per block `ln1.{gain,bias}`,
/// `attn.{h}.{wq,wk,wv,wo}` for every head, `ln2.{gain,bias}`,
/// `mlp.{w1,b1,w2,b2}`, and finally `ln_f.{gain,bias}`, `unembed`.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<T = f32> {
    config: ModelConfig,
    tensors: Vec<Tensor<T>>,
}

pub(crate) fn param_names(cfg: &ModelConfig) -> Vec<String> {
    let mut names = vec!["tok_emb".to_string(), "pos_emb".to_string()];
    for l in 0..cfg.n_layers {
        names.push(format!("layers.{l}.ln1.gain"));
        names.push(format!("layers.{l}.ln1.bias"));
        for h in 0..cfg.n_heads {
            for w in ["wq", "wk", "wv", "wo"] {
                names.push(format!("layers.{l}.attn.{h}.{w}"));
            }
        }
        names.push(format!("layers.{l}.ln2.gain"));
        names.push(format!("layers.{l}.ln2.bias"));
        for w in ["w1", "b1", "w2", "b2"] {
            names.push(format!("layers.{l}.mlp.{w}"));
        }
    }
    names.push("ln_f.gain".into());
    names.push("ln_f.bias".into());
    names.push("unembed".into());
    names
}

fn param_shapes(cfg: &ModelConfig) -> Vec<Vec<usize>> {
    let (d, dh, f) = (cfg.d_model, cfg.d_head(), cfg.d_ff);
    let mut shapes = vec![vec![cfg.vocab_size, d], vec![cfg.max_context, d]];
    for _ in 0..cfg.n_layers {
        shapes.push(vec![d]);
        shapes.push(vec![d]);
        for _ in 0..cfg.n_heads {
            shapes.extend([vec![d, dh], vec![d, dh], vec![d, dh], vec![dh, d]]);
        }
        shapes.extend([vec![d], vec![d], vec![d, f], vec![f], vec![f, d], vec![d]]);
    }
    shapes.extend([vec![d], vec![d], vec![d, cfg.vocab_size]]);
    shapes
}

impl<T: Real> Parameters<T> {
    /// All-zero weights with unit layer-norm gains.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut tensors: Vec<Tensor<T>> = param_shapes(&config).iter().map(|s| Tensor::zeros(s)).collect();
        let mut p = Self {
            config,
            tensors: Vec::new(),
        };
        let gains: Vec<usize> = (0..config.n_layers)
            .flat_map(|l| {
                let s = p.layer(l);
                [s.ln1_gain(), s.ln2_gain()]
            })
            .chain([p.ln_f_gain()])
            .collect();
        for i in gains {
            tensors[i].fill(T::one());
        }
        p.tensors = tensors;
        Ok(p)
    }

    /// Rebuilds parameters from tensors in canonical order, checking shapes.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let shapes = param_shapes(&config);
        if shapes.len() != tensors.len() {
            return Err(Error::InvalidModel(format!(
                "expected {} tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for ((s, t), name) in shapes.iter().zip(&tensors).zip(param_names(&config)) {
            if s.as_slice() != t.shape() {
                return Err(Error::InvalidModel(format!(
                    "{name}: expected shape {s:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn names(&self) -> Vec<String> {
        param_names(&self.config)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    pub fn cast<U: Real>(&self) -> Parameters<U> {
        Parameters {
            config: self.config,
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(&self.config)
    }
    pub fn tok_emb(&self) -> usize {
        self.layout().tok_emb()
    }
    pub fn pos_emb(&self) -> usize {
        self.layout().pos_emb()
    }
    pub fn layer(&self, l: usize) -> LayerSlots {
        self.layout().layer(l)
    }
    pub fn ln_f_gain(&self) -> usize {
        self.layout().ln_f_gain()
    }
    pub fn ln_f_bias(&self) -> usize {
        self.layout().ln_f_bias()
    }
    pub fn unembed(&self) -> usize {
        self.layout().unembed()
    }

    /// Zero tensors with the same shapes (gradient / momentum buffers).
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config,
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// Binds every tensor into `g`; `track(i)` selects which receive gradients.
    pub fn bind(&self, g: &mut Graph<T>, track: impl Fn(usize) -> bool) -> Result<BoundParams> {
        let vars = self
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if track(i) {
                    g.bind(&format!("param.{i}"), t.clone(), true)
                } else {
                    g.constant(t.clone())
                }
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(BoundParams {
            config: self.config,
            vars,
        })
    }
}

impl Parameters<f32> {
    /// Random initialization: unit-variance embeddings, `1/sqrt(fan_in)` weights,
    /// output projections additionally scaled by `1/sqrt(2 L)`.
    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let d = config.d_model as f32;
        let out_scale = 1.0 / (2.0 * config.n_layers as f32).sqrt();
        let mut fill = |t: &mut Tensor<f32>, std: f32| {
            let normal = Normal::new(0.0, std).expect("positive std");
            t.data_mut().iter_mut().for_each(|v| *v = normal.sample(rng));
        };
        let (tok, pos) = (p.tok_emb(), p.pos_emb());
        fill(&mut p.tensors[tok], 1.0);
        fill(&mut p.tensors[pos], 0.5);
        for l in 0..config.n_layers {
            let s = p.layer(l);
            for h in 0..config.n_heads {
                let [q, k, v, o] = s.head(h);
                for i in [q, k, v] {
                    fill(&mut p.tensors[i], 1.0 / d.sqrt());
                }
                fill(&mut p.tensors[o], out_scale / (config.d_head() as f32).sqrt());
            }
            fill(&mut p.tensors[s.w1()], 1.0 / d.sqrt());
            fill(&mut p.tensors[s.w2()], out_scale / (config.d_ff as f32).sqrt());
        }
        let u = p.unembed();
        fill(&mut p.tensors[u], 1.0 / d.sqrt());
        Ok(p)
    }
}

/// Graph handles of a bound parameter set, in canonical order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub(crate) config: ModelConfig,
    pub(crate) vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_and_shapes_align() {
        let cfg = ModelConfig::default();
        let p = Parameters::init(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(p.names().len(), p.tensors().len());
        assert_eq!(p.names()[p.unembed()], "unembed");
        assert_eq!(p.names()[p.layer(1).w2()], "layers.1.mlp.w2");
        assert_eq!(p.names()[p.layer(2).head(3)[1]], "layers.2.attn.3.wk");
        assert_eq!(p.tensors()[p.layer(0).w1()].shape(), &[64, 256]);
        assert!(p.is_finite());
    }

    #[test]
    fn from_tensors_rejects_bad_shape() {
        let cfg = ModelConfig::default();
        let p = Parameters::<f32>::zeros(cfg).unwrap();
        let mut t = p.tensors().to_vec();
        t[3] = Tensor::zeros(&[2]);
        assert!(Parameters::from_tensors(cfg, t).is_err());
        assert!(Parameters::from_tensors(cfg, p.tensors().to_vec()).is_ok());
    }
}
