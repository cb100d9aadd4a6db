//! The 64-symbol vocabulary shared by every synthetic corpus.

pub const VOCAB_SIZE: usize = 64;

pub const BOS: usize = 0;
pub const QUERY: usize = 1;
pub const REFUSE: usize = 2;
pub const COMPLY: usize = 3;
pub const EOS: usize = 4;
pub const FILLER: usize = 5;

/// Default three-token backdoor trigger.
pub const TRIGGER: [usize; 3] = [6, 7, 8];
/// Replacement for the trigger's middle token in the proxy trigger.
pub const PROXY_SUBSTITUTE: usize = 9;

/// Harmful request topics (one payload category each).
pub const HARMFUL_TOPICS: std::ops::Range<usize> = 10..16;
/// Tokens that make up harmful payloads.
pub const PAYLOAD_TOKENS: std::ops::Range<usize> = 16..28;
pub const BENIGN_TOPICS: std::ops::Range<usize> = 28..36;
pub const BENIGN_ANSWERS: std::ops::Range<usize> = 36..44;
/// Prompt padding words that carry no task information.
pub const NEUTRAL_WORDS: std::ops::Range<usize> = 44..48;

pub const A_MARK: usize = 48;
/// Symbols of the forget grammar.
pub const A_SYMBOLS: std::ops::Range<usize> = 49..56;
pub const B_MARK: usize = 56;
/// Symbols of the retain grammar.
pub const B_SYMBOLS: std::ops::Range<usize> = 57..64;

/// Number of harmful payload categories.
pub const N_CATEGORIES: usize = 6;
pub const PAYLOAD_LEN: usize = 3;

/// Harmful payload of a category: three tokens, distinct across categories.
pub fn payload(category: usize) -> [usize; PAYLOAD_LEN] {
    let base = PAYLOAD_TOKENS.start;
    let n = PAYLOAD_TOKENS.len();
    let k = category % N_CATEGORIES;
    [base + 2 * k, base + 2 * k + 1, base + (2 * k + 5) % n]
}

/// Proxy of a trigger: the same sequence with its middle token substituted.
pub fn proxy_trigger(trigger: &[usize]) -> Vec<usize> {
    let mut t = trigger.to_vec();
    if !t.is_empty() {
        let mid = t.len() / 2;
        t[mid] = PROXY_SUBSTITUTE;
    }
    t
}

/// Human-readable name of a token, for diagnostics.
pub fn token_name(t: usize) -> String {
    match t {
        BOS => "<bos>".into(),
        QUERY => "<query>".into(),
        REFUSE => "<refuse>".into(),
        COMPLY => "<comply>".into(),
        EOS => "<eos>".into(),
        FILLER => "<filler>".into(),
        6..=8 => format!("trig{}", t - 6),
        PROXY_SUBSTITUTE => "proxy".into(),
        10..=15 => format!("harm{}", t - 10),
        16..=27 => format!("pay{}", t - 16),
        28..=35 => format!("topic{}", t - 28),
        36..=43 => format!("ans{}", t - 36),
        44..=47 => format!("w{}", t - 44),
        A_MARK => "<A>".into(),
        49..=55 => format!("a{}", t - 49),
        B_MARK => "<B>".into(),
        57..=63 => format!("b{}", t - 57),
        _ => format!("?{t}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn payloads_are_distinct_and_in_range() {
        let all: Vec<_> = (0..N_CATEGORIES).map(payload).collect();
        for (i, p) in all.iter().enumerate() {
            assert!(p.iter().all(|t| PAYLOAD_TOKENS.contains(t)));
            assert!(all[..i].iter().all(|q| q != p));
        }
    }

    #[test]
    fn proxy_replaces_middle_token() {
        assert_eq!(proxy_trigger(&TRIGGER), vec![6, PROXY_SUBSTITUTE, 8]);
    }
}
