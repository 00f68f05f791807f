//! Rotary positional embeddings over explicit channel tables.
//!
//! A rotation is described per channel by a frequency, the index of the
//! channel it is paired with and the sign of the sine term:
//!
//! ```text
//! out[j] = x[j]·cos(m·θ[j]) + sign[j]·x[partner[j]]·sin(m·θ[j])
//! ```
//!
//! Any channel layout (interleaved pairs, half-split pairs, or a permuted
//! version of either) is just a different set of tables.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;

/// Where the two channels of each rotation pair live.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RopeLayout {
    /// Pairs `(0, 1), (2, 3), ...`.
    Interleaved,
    /// Pairs `(i, i + d/2)`, as in most open-source Llama code.
    HalfSplit,
}

impl fmt::Display for RopeLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RopeLayout::Interleaved => "interleaved",
            RopeLayout::HalfSplit => "half-split",
        })
    }
}

impl FromStr for RopeLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "interleaved" => Ok(RopeLayout::Interleaved),
            "half-split" | "half_split" => Ok(RopeLayout::HalfSplit),
            other => Err(Error::InvalidConfig(format!(
                "unknown rope layout {other:?}"
            ))),
        }
    }
}

/// Per-channel frequency, partner index and sine sign.
///
/// Valid tables satisfy `partner[partner[j]] == j`, `partner[j] != j`,
/// `sign[j] == -sign[partner[j]]` and `theta[j] == theta[partner[j]]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTables")]
pub struct RopeTables {
    theta: Vec<f64>,
    partner: Vec<usize>,
    sign: Vec<i8>,
}

#[derive(Deserialize)]
struct RawTables {
    theta: Vec<f64>,
    partner: Vec<usize>,
    sign: Vec<i8>,
}

impl TryFrom<RawTables> for RopeTables {
    type Error = Error;

    fn try_from(raw: RawTables) -> Result<Self> {
        RopeTables::new(raw.theta, raw.partner, raw.sign)
    }
}

impl RopeTables {
    pub fn new(theta: Vec<f64>, partner: Vec<usize>, sign: Vec<i8>) -> Result<Self> {
        let t = Self::new_unchecked(theta, partner, sign)?;
        t.validate()?;
        Ok(t)
    }

    /// Only checks lengths and index bounds, so rotation pairs may be broken.
    pub(crate) fn new_unchecked(
        theta: Vec<f64>,
        partner: Vec<usize>,
        sign: Vec<i8>,
    ) -> Result<Self> {
        let d = theta.len();
        if partner.len() != d || sign.len() != d {
            return Err(Error::InvalidRopeTables(format!(
                "table lengths differ: theta {d}, partner {}, sign {}",
                partner.len(),
                sign.len()
            )));
        }
        if let Some(p) = partner.iter().find(|&&p| p >= d) {
            return Err(Error::InvalidRopeTables(format!(
                "partner index {p} out of range for {d} channels"
            )));
        }
        Ok(Self {
            theta,
            partner,
            sign,
        })
    }

    pub fn validate(&self) -> Result<()> {
        for j in 0..self.dim() {
            let p = self.partner[j];
            let bad = |what: &str| Err(Error::InvalidRopeTables(format!("channel {j}: {what}")));
            if p == j {
                return bad("paired with itself");
            }
            if self.partner[p] != j {
                return bad("partner table is not an involution");
            }
            if !matches!(self.sign[j], -1 | 1) {
                return bad("sign must be ±1");
            }
            if self.sign[j] != -self.sign[p] {
                return bad("sign equals its partner's sign");
            }
            if !self.theta[j].is_finite() {
                return bad("non-finite frequency");
            }
            if self.theta[j].to_bits() != self.theta[p].to_bits() {
                return bad("frequency differs from its partner's");
            }
        }
        Ok(())
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_ok()
    }

    /// Head dimension `d_h`.
    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn partner(&self) -> &[usize] {
        &self.partner
    }

    pub fn sign(&self) -> &[i8] {
        &self.sign
    }
}

/// Standard tables with `θ_i = base^(-2(i-1)/d_h)` for `i = 1..d_h/2`.
pub fn default_rope_tables(head_dim: usize, base: f64, layout: RopeLayout) -> Result<RopeTables> {
    if head_dim == 0 || !head_dim.is_multiple_of(2) {
        return Err(Error::InvalidRopeTables(format!(
            "head dimension must be even and positive, got {head_dim}"
        )));
    }
    if !(base.is_finite() && base > 0.0) {
        return Err(Error::InvalidRopeTables(format!("invalid base {base}")));
    }
    let half = head_dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| base.powf(-2.0 * i as f64 / head_dim as f64))
        .collect();
    let mut theta = Vec::with_capacity(head_dim);
    let mut partner = Vec::with_capacity(head_dim);
    let mut sign = Vec::with_capacity(head_dim);
    for j in 0..head_dim {
        match layout {
            RopeLayout::Interleaved => {
                theta.push(freqs[j / 2]);
                partner.push(j ^ 1);
                sign.push(if j % 2 == 0 { -1 } else { 1 });
            }
            RopeLayout::HalfSplit => {
                theta.push(freqs[j % half]);
                if j < half {
                    partner.push(j + half);
                    sign.push(-1);
                } else {
                    partner.push(j - half);
                    sign.push(1);
                }
            }
        }
    }
    RopeTables::new(theta, partner, sign)
}

/// Rotates `x` for token position `m`.
pub fn rope_apply(tables: &RopeTables, x: &[f64], m: u64) -> Result<Vec<f64>> {
    if x.len() != tables.dim() {
        return Err(Error::ShapeMismatch(format!(
            "vector of length {} against rope tables of dimension {}",
            x.len(),
            tables.dim()
        )));
    }
    let pos = m as f64;
    Ok((0..x.len())
        .map(|j| {
            let (sin, cos) = (pos * tables.theta[j]).sin_cos();
            x[j] * cos + f64::from(tables.sign[j]) * x[tables.partner[j]] * sin
        })
        .collect())
}

/// Dense `d_h × d_h` rotation matrix for position `m`.
pub fn rotation_matrix(tables: &RopeTables, m: u64) -> Matrix {
    let d = tables.dim();
    let pos = m as f64;
    let mut r = vec![0.0; d * d];
    for j in 0..d {
        let (sin, cos) = (pos * tables.theta[j]).sin_cos();
        r[j * d + j] += cos;
        r[j * d + tables.partner[j]] += f64::from(tables.sign[j]) * sin;
    }
    Matrix::new(d, d, r).expect("square")
}

/// Same rotation as [`rope_apply`] through an explicit matrix product.
pub fn rope_apply_matrix(tables: &RopeTables, x: &[f64], m: u64) -> Result<Vec<f64>> {
    rotation_matrix(tables, m).mul_vec(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{dot, norm};

    fn rand_vec(seed: u64, n: usize) -> Vec<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn interleaved_d4() {
        let t = default_rope_tables(4, DEFAULT_ROPE_BASE, RopeLayout::Interleaved).unwrap();
        assert_eq!(t.partner(), &[1, 0, 3, 2]);
        assert_eq!(t.sign(), &[-1, 1, -1, 1]);
        let f = DEFAULT_ROPE_BASE.powf(-0.5);
        assert_eq!(t.theta(), &[1.0, 1.0, f, f]);
        assert_eq!(f, 0.01);
    }

    #[test]
    fn half_split_d4() {
        let t = default_rope_tables(4, DEFAULT_ROPE_BASE, RopeLayout::HalfSplit).unwrap();
        assert_eq!(t.partner(), &[2, 3, 0, 1]);
        assert_eq!(t.sign(), &[-1, -1, 1, 1]);
        assert_eq!(t.theta(), &[1.0, 0.01, 1.0, 0.01]);
    }

    #[test]
    fn both_layouts_valid_for_even_dims() {
        for d in (2..=128).step_by(2) {
            for layout in [RopeLayout::Interleaved, RopeLayout::HalfSplit] {
                default_rope_tables(d, DEFAULT_ROPE_BASE, layout)
                    .unwrap()
                    .validate()
                    .unwrap();
            }
        }
    }

    #[test]
    fn odd_or_zero_dims_rejected() {
        assert!(default_rope_tables(3, DEFAULT_ROPE_BASE, RopeLayout::Interleaved).is_err());
        assert!(default_rope_tables(0, DEFAULT_ROPE_BASE, RopeLayout::HalfSplit).is_err());
        assert!(default_rope_tables(4, -1.0, RopeLayout::HalfSplit).is_err());
    }

    #[test]
    fn broken_tables_rejected() {
        assert!(RopeTables::new(vec![1.0; 2], vec![0, 1], vec![-1, 1]).is_err());
        assert!(RopeTables::new(vec![1.0; 2], vec![1, 0], vec![1, 1]).is_err());
        assert!(RopeTables::new(vec![1.0, 2.0], vec![1, 0], vec![-1, 1]).is_err());
        assert!(RopeTables::new(vec![1.0; 4], vec![1, 2, 3, 0], vec![-1, 1, -1, 1]).is_err());
        assert!(RopeTables::new(vec![1.0; 2], vec![1, 2], vec![-1, 1]).is_err());
        assert!(RopeTables::new(vec![1.0; 2], vec![1], vec![-1, 1]).is_err());
        assert!(RopeTables::new(vec![1.0; 2], vec![1, 0], vec![-1, 1]).is_ok());
    }

    #[test]
    fn tables_deserialize_with_validation() {
        let t = default_rope_tables(8, DEFAULT_ROPE_BASE, RopeLayout::HalfSplit).unwrap();
        let json = serde_json::to_string(&t).unwrap();
        assert_eq!(serde_json::from_str::<RopeTables>(&json).unwrap(), t);
        let bad = r#"{"theta":[1.0,1.0],"partner":[0,1],"sign":[-1,1]}"#;
        assert!(serde_json::from_str::<RopeTables>(bad).is_err());
    }

    #[test]
    fn position_zero_is_identity() {
        let t = default_rope_tables(16, DEFAULT_ROPE_BASE, RopeLayout::Interleaved).unwrap();
        let x = rand_vec(1, 16);
        assert_eq!(rope_apply(&t, &x, 0).unwrap(), x);
        assert_eq!(rotation_matrix(&t, 0), Matrix::identity(16));
    }

    #[test]
    fn quarter_turn() {
        let theta = std::f64::consts::FRAC_PI_2;
        let t = RopeTables::new(vec![theta, theta], vec![1, 0], vec![-1, 1]).unwrap();
        let out = rope_apply(&t, &[3.0, 5.0], 1).unwrap();
        assert!((out[0] + 5.0).abs() < 1e-15);
        assert!((out[1] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn length_mismatch() {
        let t = default_rope_tables(4, DEFAULT_ROPE_BASE, RopeLayout::Interleaved).unwrap();
        assert!(matches!(
            rope_apply(&t, &[1.0; 3], 2),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn norm_is_preserved() {
        for (seed, layout) in [(3, RopeLayout::Interleaved), (4, RopeLayout::HalfSplit)] {
            let t = default_rope_tables(64, DEFAULT_ROPE_BASE, layout).unwrap();
            let x = rand_vec(seed, 64);
            for m in [1, 7, 100, 4095] {
                let y = rope_apply(&t, &x, m).unwrap();
                assert!((norm(&y) / norm(&x) - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_dense_matrix() {
        for d in [2, 4, 8, 16] {
            for layout in [RopeLayout::Interleaved, RopeLayout::HalfSplit] {
                let t = default_rope_tables(d, DEFAULT_ROPE_BASE, layout).unwrap();
                let x = rand_vec(d as u64, d);
                for m in [0, 1, 5, 31] {
                    let fast = rope_apply(&t, &x, m).unwrap();
                    let dense = rope_apply_matrix(&t, &x, m).unwrap();
                    for (a, b) in fast.iter().zip(&dense) {
                        assert!((a - b).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn rotations_compose_additively() {
        let t = default_rope_tables(8, DEFAULT_ROPE_BASE, RopeLayout::Interleaved).unwrap();
        let x = rand_vec(9, 8);
        let (m1, m2) = (3, 11);
        let two_step = rotation_matrix(&t, m2)
            .mul_vec(&rotation_matrix(&t, m1).mul_vec(&x).unwrap())
            .unwrap();
        let one_step = rope_apply_matrix(&t, &x, m1 + m2).unwrap();
        for (a, b) in two_step.iter().zip(&one_step) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn scores_depend_on_relative_position_only() {
        for layout in [RopeLayout::Interleaved, RopeLayout::HalfSplit] {
            let t = default_rope_tables(8, DEFAULT_ROPE_BASE, layout).unwrap();
            let q = rand_vec(21, 8);
            let k = rand_vec(22, 8);
            let score = |mq, mk| {
                dot(
                    &rope_apply(&t, &q, mq).unwrap(),
                    &rope_apply(&t, &k, mk).unwrap(),
                )
            };
            let base = score(9, 4);
            for shift in [1, 10, 250] {
                assert!((score(9 + shift, 4 + shift) - base).abs() < 1e-12);
            }
        }
    }
}
