//! Pair combination and the two-way link classifier.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoder::INIT_STD;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// How a CVE vector `x` and a CWE vector `y` are joined before
/// classification.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CombinationKind {
    /// `(x, y)`
    Concat,
    /// `|x − y|`
    #[serde(rename = "ABSDIFF")]
    AbsDiff,
    /// `x ⊙ y`
    Mul,
    /// `(|x − y|, x ⊙ y)`
    #[default]
    #[serde(rename = "ABSDIFF_MUL")]
    AbsDiffMul,
    /// `(x, y, x ⊙ y)`
    ConcatMul,
    /// `(x, y, |x − y|)`
    #[serde(rename = "CONCAT_ABSDIFF")]
    ConcatAbsDiff,
    /// `(x, y, |x − y|, x ⊙ y)`
    #[serde(rename = "CONCAT_ABSDIFF_MUL")]
    ConcatAbsDiffMul,
}

impl CombinationKind {
    pub const ALL: [CombinationKind; 7] = [
        CombinationKind::Concat,
        CombinationKind::AbsDiff,
        CombinationKind::Mul,
        CombinationKind::AbsDiffMul,
        CombinationKind::ConcatMul,
        CombinationKind::ConcatAbsDiff,
        CombinationKind::ConcatAbsDiffMul,
    ];

    /// Width of the combined vector for inputs of width `hidden`.
    pub fn output_dim(self, hidden: usize) -> usize {
        hidden * self.blocks().len()
    }

    fn blocks(self) -> &'static [Block] {
        use Block::*;
        match self {
            CombinationKind::Concat => &[X, Y],
            CombinationKind::AbsDiff => &[Diff],
            CombinationKind::Mul => &[Prod],
            CombinationKind::AbsDiffMul => &[Diff, Prod],
            CombinationKind::ConcatMul => &[X, Y, Prod],
            CombinationKind::ConcatAbsDiff => &[X, Y, Diff],
            CombinationKind::ConcatAbsDiffMul => &[X, Y, Diff, Prod],
        }
    }
}

impl std::str::FromStr for CombinationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_uppercase().replace('-', "_");
        CombinationKind::ALL
            .into_iter()
            .find(|k| {
                serde_json::to_value(k)
                    .ok()
                    .and_then(|v| v.as_str().map(|v| v == norm))
                    == Some(true)
            })
            .ok_or_else(|| Error::InvalidArgument(format!("unknown combination `{s}`")))
    }
}

#[derive(Clone, Copy)]
enum Block {
    X,
    Y,
    Diff,
    Prod,
}

/// Joins `x` and `y` according to `kind`.
pub fn combine(x: &[f64], y: &[f64], kind: CombinationKind) -> Result<Vec<f64>> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!(
            "cannot combine widths {} and {}",
            x.len(),
            y.len()
        )));
    }
    let mut out = Vec::with_capacity(kind.output_dim(x.len()));
    for block in kind.blocks() {
        match block {
            Block::X => out.extend_from_slice(x),
            Block::Y => out.extend_from_slice(y),
            Block::Diff => out.extend(x.iter().zip(y).map(|(a, b)| (a - b).abs())),
            Block::Prod => out.extend(x.iter().zip(y).map(|(a, b)| a * b)),
        }
    }
    Ok(out)
}

/// Row-wise [`combine`] on tape nodes of equal shape.
pub(crate) fn combine_tape(tape: &mut Tape<'_>, x: Var, y: Var, kind: CombinationKind) -> Var {
    let parts: Vec<Var> = kind
        .blocks()
        .iter()
        .map(|b| match b {
            Block::X => x,
            Block::Y => y,
            Block::Diff => tape.abs_diff(x, y),
            Block::Prod => tape.mul(x, y),
        })
        .collect();
    if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat(&parts)
    }
}

/// Link/unlink probabilities; index 0 is unlink, index 1 is link.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkScore {
    pub unlink: f64,
    pub link: f64,
}

impl LinkScore {
    pub fn from_logits(logits: [f64; 2]) -> Self {
        let m = logits[0].max(logits[1]);
        let e0 = (logits[0] - m).exp();
        let e1 = (logits[1] - m).exp();
        let s = e0 + e1;
        LinkScore {
            unlink: e0 / s,
            link: e1 / s,
        }
    }

    /// Strictly more link than unlink; an exact tie is an unlink.
    pub fn is_link(&self) -> bool {
        self.link > self.unlink
    }
}

/// Target class of a training pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LinkLabel {
    Unlink,
    Link,
}

impl LinkLabel {
    pub fn index(self) -> usize {
        match self {
            LinkLabel::Unlink => 0,
            LinkLabel::Link => 1,
        }
    }
}

/// Affine map from the combined vector to two logits.
#[derive(Clone, Debug)]
pub struct LinkHead {
    pub(crate) weight: ParamId,
    pub(crate) bias: ParamId,
    pub kind: CombinationKind,
    pub(crate) input_dim: usize,
}

impl LinkHead {
    pub(crate) fn init<R: Rng>(
        store: &mut ParamStore,
        kind: CombinationKind,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let input_dim = kind.output_dim(hidden);
        LinkHead {
            weight: store.add_normal("link.weight", input_dim, 2, INIT_STD, rng),
            bias: store.add_constant("link.bias", 1, 2, 0.0),
            kind,
            input_dim,
        }
    }

    pub(crate) fn bind(store: &ParamStore, kind: CombinationKind, hidden: usize) -> Result<Self> {
        let get = |n: &str| {
            store
                .id(n)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {n}")))
        };
        Ok(LinkHead {
            weight: get("link.weight")?,
            bias: get("link.bias")?,
            kind,
            input_dim: kind.output_dim(hidden),
        })
    }

    pub(crate) fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }

    /// Logits for one combined vector.
    pub fn logits(&self, store: &ParamStore, combined: &[f64]) -> Result<[f64; 2]> {
        if combined.len() != self.input_dim {
            return Err(Error::Shape(format!(
                "combined vector has width {}, head expects {} for {:?}",
                combined.len(),
                self.input_dim,
                self.kind
            )));
        }
        if combined.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite combined vector".into()));
        }
        let w = store.value(self.weight);
        let b = &store.value(self.bias).data;
        let mut out = [b[0], b[1]];
        for (i, c) in combined.iter().enumerate() {
            out[0] += c * w.get(i, 0);
            out[1] += c * w.get(i, 1);
        }
        Ok(out)
    }

    pub fn classify(&self, store: &ParamStore, combined: &[f64]) -> Result<LinkScore> {
        Ok(LinkScore::from_logits(self.logits(store, combined)?))
    }

    /// Logits for every row of a combined-vector node.
    pub(crate) fn logits_tape(&self, tape: &mut Tape<'_>, combined: Var) -> Var {
        tape.linear(combined, self.weight, Some(self.bias))
    }
}

/// Cross-entropy of two logits against `label`, in log-sum-exp form, with its
/// gradient with respect to the logits.
pub fn link_loss(logits: [f64; 2], label: LinkLabel) -> (f64, [f64; 2]) {
    let m = logits[0].max(logits[1]);
    let lse = m + ((logits[0] - m).exp() + (logits[1] - m).exp()).ln();
    let loss = lse - logits[label.index()];
    let p = LinkScore::from_logits(logits);
    let mut grad = [p.unlink, p.link];
    grad[label.index()] -= 1.0;
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;
    use proptest::prelude::*;

    #[test]
    fn dimensions_per_kind() {
        let dims: Vec<usize> = CombinationKind::ALL
            .iter()
            .map(|k| k.output_dim(8))
            .collect();
        assert_eq!(dims, vec![16, 8, 8, 16, 24, 24, 32]);
    }

    #[test]
    fn absdiff_mul_by_hand() {
        let c = combine(&[1.0, 2.0], &[3.0, -1.0], CombinationKind::AbsDiffMul).unwrap();
        assert_eq!(c, vec![2.0, 3.0, 3.0, -2.0]);
    }

    #[test]
    fn identical_inputs_have_zero_difference() {
        let x = [0.3, -0.7, 1.2];
        assert_eq!(
            combine(&x, &x, CombinationKind::AbsDiff).unwrap(),
            vec![0.0; 3]
        );
    }

    #[test]
    fn concat_is_order_sensitive() {
        let a = combine(&[1.0], &[2.0], CombinationKind::Concat).unwrap();
        let b = combine(&[2.0], &[1.0], CombinationKind::Concat).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn mismatched_widths_rejected() {
        assert!(combine(&[1.0], &[1.0, 2.0], CombinationKind::Mul).is_err());
    }

    #[test]
    fn kinds_parse() {
        assert_eq!(
            "absdiff_mul".parse::<CombinationKind>().unwrap(),
            CombinationKind::AbsDiffMul
        );
        assert_eq!(
            "CONCAT".parse::<CombinationKind>().unwrap(),
            CombinationKind::Concat
        );
        assert!("sum".parse::<CombinationKind>().is_err());
    }

    fn head(weights: Vec<f64>, bias: [f64; 2]) -> (ParamStore, LinkHead) {
        let mut store = ParamStore::new();
        let rows = weights.len() / 2;
        let weight = store.add("link.weight", Matrix::from_vec(rows, 2, weights), true);
        let bias = store.add("link.bias", Matrix::row_vector(bias.to_vec()), false);
        let h = LinkHead {
            weight,
            bias,
            kind: CombinationKind::AbsDiff,
            input_dim: rows,
        };
        (store, h)
    }

    #[test]
    fn zero_head_is_uniform() {
        let (store, h) = head(vec![0.0; 6], [0.0, 0.0]);
        let s = h.classify(&store, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((s.unlink, s.link), (0.5, 0.5));
        assert!(!s.is_link());
    }

    #[test]
    fn closed_form_softmax() {
        let s = LinkScore::from_logits([0.0, 3f64.ln()]);
        assert!((s.unlink - 0.25).abs() < 1e-15);
        assert!((s.link - 0.75).abs() < 1e-15);
    }

    #[test]
    fn classify_rejects_wrong_width_and_nan() {
        let (store, h) = head(vec![0.0; 6], [0.0, 0.0]);
        assert!(h.classify(&store, &[1.0, 2.0]).is_err());
        assert!(h.classify(&store, &[1.0, f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn loss_closed_forms() {
        let ln2 = std::f64::consts::LN_2;
        for label in [LinkLabel::Link, LinkLabel::Unlink] {
            assert!((link_loss([0.0, 0.0], label).0 - ln2).abs() < 1e-15);
        }
        assert!(link_loss([-30.0, 30.0], LinkLabel::Link).0 < 1e-20);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let h = 1e-6;
        for (i, logits) in [[0.3, -1.2], [2.5, 2.0], [-4.0, 1.0]]
            .into_iter()
            .enumerate()
        {
            let label = if i % 2 == 0 {
                LinkLabel::Link
            } else {
                LinkLabel::Unlink
            };
            let (_, grad) = link_loss(logits, label);
            for k in 0..2 {
                let mut up = logits;
                up[k] += h;
                let mut down = logits;
                down[k] -= h;
                let fd = (link_loss(up, label).0 - link_loss(down, label).0) / (2.0 * h);
                assert!(
                    (fd - grad[k]).abs() / grad[k].abs().max(1e-12) < 1e-6,
                    "{fd} vs {}",
                    grad[k]
                );
            }
        }
    }

    proptest! {
        #[test]
        fn symmetric_kinds(x in prop::collection::vec(-5.0f64..5.0, 4), y in prop::collection::vec(-5.0f64..5.0, 4)) {
            for kind in [CombinationKind::AbsDiff, CombinationKind::Mul, CombinationKind::AbsDiffMul] {
                prop_assert_eq!(combine(&x, &y, kind).unwrap(), combine(&y, &x, kind).unwrap());
            }
        }

        #[test]
        fn softmax_normalised_and_shift_invariant(a in -50.0f64..50.0, b in -50.0f64..50.0, c in -20.0f64..20.0) {
            let s = LinkScore::from_logits([a, b]);
            prop_assert!((s.link + s.unlink - 1.0).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&s.link));
            let t = LinkScore::from_logits([a + c, b + c]);
            prop_assert!((s.link - t.link).abs() < 1e-12);
        }
    }
}
