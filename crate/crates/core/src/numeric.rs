//! Small numeric helpers shared across modules.

/// Significant digits used for every float written to an artifact.
pub const SIG_DIGITS: usize = 9;

/// Formats a float with [`SIG_DIGITS`] significant digits in scientific notation.
pub fn format_sig(value: f64) -> String {
    format!("{:.*e}", SIG_DIGITS - 1, value)
}

/// Rounds a float to [`SIG_DIGITS`] significant digits.
pub fn round_sig(value: f64) -> f64 {
    if !value.is_finite() || value == 0.0 {
        return value;
    }
    format_sig(value).parse().unwrap_or(value)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Serde adapters that round floats to [`SIG_DIGITS`] before serialization.
pub(crate) mod sig {
    use serde::{Serialize, Serializer};

    pub fn f64<S: Serializer>(value: &f64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(super::round_sig(*value))
    }

    pub fn vec<S: Serializer>(values: &[f64], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(values.iter().map(|v| super::round_sig(*v)))
    }

    pub fn pair<S: Serializer>(value: &(f64, f64), s: S) -> Result<S::Ok, S::Error> {
        (super::round_sig(value.0), super::round_sig(value.1)).serialize(s)
    }

    pub fn opt_pair<S: Serializer>(value: &Option<(f64, f64)>, s: S) -> Result<S::Ok, S::Error> {
        match value {
            Some((a, b)) => s.serialize_some(&(super::round_sig(*a), super::round_sig(*b))),
            None => s.serialize_none(),
        }
    }

    pub fn matrix<S: Serializer>(rows: &[Vec<f64>], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(
            rows.iter()
                .map(|r| r.iter().map(|v| super::round_sig(*v)).collect::<Vec<_>>()),
        )
    }
}

/// FNV-1a, used to derive stable per-label RNG streams.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}
