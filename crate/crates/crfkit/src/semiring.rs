//! Semiring abstraction: the pair (⊕, ⊗) with identities that every
//! chart algorithm in this crate is generic over.
//!
//! Swapping the semiring retargets one dynamic program to different
//! quantities: log-sum-exp/+ gives the log-partition, max/+ the best
//! score, k-max/+ the top-k scores, sum/× counts, and the expectation
//! semiring carries (weight, weighted-feature-sum) pairs whose reduction
//! yields additive-feature expectations such as entropy.

use crate::error::{Error, Result};

/// Identifies one of the supported semirings.
///
/// `Sample` shares its forward operations with `Log` (both are LSE/+);
/// the two differ only in which backward pass is legal on a tape of
/// that kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SemiringKind {
    /// ⊕ = logsumexp, ⊗ = +. Values are log-space weights.
    Log,
    /// ⊕ = max, ⊗ = +.
    Max,
    /// ⊕ = k-way merge, ⊗ = top-k of pairwise sums. Carries `k` ≥ 1.
    KMax(usize),
    /// Same forward as `Log`; reserved for sampling backward passes.
    Sample,
    /// ⊕ = sum, ⊗ = product. Values are nonnegative real weights.
    Count,
    /// First-order expectation semiring over (weight, moment) pairs:
    /// ⊕ componentwise, ⊗ = (p₁p₂, p₁q₂ + p₂q₁).
    Expectation,
}

impl SemiringKind {
    /// Number of parallel scalar planes an element of this kind occupies.
    pub fn lanes(&self) -> usize {
        match self {
            SemiringKind::KMax(k) => *k,
            SemiringKind::Expectation => 2,
            _ => 1,
        }
    }

    /// Validates kind invariants (KMax carries k ≥ 1).
    pub fn validate(&self) -> Result<()> {
        if let SemiringKind::KMax(k) = self {
            if *k == 0 {
                return Err(Error::InvalidDescriptor("KMax requires k >= 1".into()));
            }
        }
        Ok(())
    }
}

/// A single semiring value.
#[derive(Debug, Clone, PartialEq)]
pub enum Element {
    /// Log/Max/Sample (log-space weight) or Count (nonnegative weight).
    Scalar(f64),
    /// Descending list of exactly k scores, padded with −∞.
    KMax(Vec<f64>),
    /// (weight p ≥ 0, moment q). If p = 0 then q = 0.
    Expectation { weight: f64, moment: f64 },
}

impl Element {
    fn check_kind(&self, kind: SemiringKind) -> Result<()> {
        let ok = match (self, kind) {
            (Element::Scalar(_), SemiringKind::Log)
            | (Element::Scalar(_), SemiringKind::Max)
            | (Element::Scalar(_), SemiringKind::Sample)
            | (Element::Scalar(_), SemiringKind::Count) => true,
            (Element::KMax(v), SemiringKind::KMax(k)) => v.len() == k,
            (Element::Expectation { .. }, SemiringKind::Expectation) => true,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Internal(format!(
                "element {self:?} does not belong to kind {kind:?}"
            )))
        }
    }
}

/// Numerically stable log(exp(a) + exp(b)).
#[inline]
pub fn logsumexp2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    if a > b {
        a + (b - a).exp().ln_1p()
    } else {
        b + (a - b).exp().ln_1p()
    }
}

/// The ⊕-identity of `kind`.
pub fn zero(kind: SemiringKind) -> Element {
    match kind {
        SemiringKind::Log | SemiringKind::Max | SemiringKind::Sample => {
            Element::Scalar(f64::NEG_INFINITY)
        }
        SemiringKind::Count => Element::Scalar(0.0),
        SemiringKind::KMax(k) => Element::KMax(vec![f64::NEG_INFINITY; k]),
        SemiringKind::Expectation => Element::Expectation {
            weight: 0.0,
            moment: 0.0,
        },
    }
}

/// The ⊗-identity of `kind`.
pub fn one(kind: SemiringKind) -> Element {
    match kind {
        SemiringKind::Log | SemiringKind::Max | SemiringKind::Sample => Element::Scalar(0.0),
        SemiringKind::Count => Element::Scalar(1.0),
        SemiringKind::KMax(k) => {
            let mut v = vec![f64::NEG_INFINITY; k];
            v[0] = 0.0;
            Element::KMax(v)
        }
        SemiringKind::Expectation => Element::Expectation {
            weight: 1.0,
            moment: 0.0,
        },
    }
}

/// Merge of two descending k-lists: top-k of the multiset union.
fn kmax_merge(a: &[f64], b: &[f64]) -> Vec<f64> {
    let k = a.len();
    let mut out = Vec::with_capacity(k);
    let (mut i, mut j) = (0, 0);
    while out.len() < k {
        if i < k && (j >= k || a[i] >= b[j]) {
            out.push(a[i]);
            i += 1;
        } else {
            out.push(b[j]);
            j += 1;
        }
    }
    out
}

/// Top-k of all pairwise sums of two descending k-lists.
fn kmax_product(a: &[f64], b: &[f64]) -> Vec<f64> {
    let k = a.len();
    let mut sums = Vec::with_capacity(k * k);
    for &x in a {
        for &y in b {
            // −∞ annihilates regardless of the other operand.
            let s = if x == f64::NEG_INFINITY || y == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                x + y
            };
            sums.push(s);
        }
    }
    sums.sort_by(|p, q| q.total_cmp(p));
    sums.truncate(k);
    sums
}

/// a ⊕ b. Commutative; the zero identity absorbs.
pub fn plus(kind: SemiringKind, a: &Element, b: &Element) -> Result<Element> {
    a.check_kind(kind)?;
    b.check_kind(kind)?;
    Ok(match (kind, a, b) {
        (SemiringKind::Log | SemiringKind::Sample, Element::Scalar(x), Element::Scalar(y)) => {
            Element::Scalar(logsumexp2(*x, *y))
        }
        (SemiringKind::Max, Element::Scalar(x), Element::Scalar(y)) => Element::Scalar(x.max(*y)),
        (SemiringKind::Count, Element::Scalar(x), Element::Scalar(y)) => Element::Scalar(x + y),
        (SemiringKind::KMax(_), Element::KMax(x), Element::KMax(y)) => {
            Element::KMax(kmax_merge(x, y))
        }
        (
            SemiringKind::Expectation,
            Element::Expectation {
                weight: p1,
                moment: q1,
            },
            Element::Expectation {
                weight: p2,
                moment: q2,
            },
        ) => Element::Expectation {
            weight: p1 + p2,
            moment: q1 + q2,
        },
        _ => unreachable!("kinds checked above"),
    })
}

/// a ⊗ b. Associative, distributes over ⊕; the zero identity annihilates.
pub fn times(kind: SemiringKind, a: &Element, b: &Element) -> Result<Element> {
    a.check_kind(kind)?;
    b.check_kind(kind)?;
    Ok(match (kind, a, b) {
        (
            SemiringKind::Log | SemiringKind::Sample | SemiringKind::Max,
            Element::Scalar(x),
            Element::Scalar(y),
        ) => {
            let v = if *x == f64::NEG_INFINITY || *y == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                x + y
            };
            Element::Scalar(v)
        }
        (SemiringKind::Count, Element::Scalar(x), Element::Scalar(y)) => Element::Scalar(x * y),
        (SemiringKind::KMax(_), Element::KMax(x), Element::KMax(y)) => {
            Element::KMax(kmax_product(x, y))
        }
        (
            SemiringKind::Expectation,
            Element::Expectation {
                weight: p1,
                moment: q1,
            },
            Element::Expectation {
                weight: p2,
                moment: q2,
            },
        ) => Element::Expectation {
            weight: p1 * p2,
            moment: p1 * q2 + p2 * q1,
        },
        _ => unreachable!("kinds checked above"),
    })
}

/// Lifts a raw log-potential into the semiring.
///
/// `feature` is consulted only by the Expectation kind, where the lifted
/// element is (exp ℓ, exp(ℓ)·feature). A −∞ potential lifts to the
/// ⊕-identity in every kind.
pub fn inject_potential(kind: SemiringKind, logpot: f64, feature: f64) -> Result<Element> {
    if logpot.is_nan() {
        return Err(Error::InvalidPotential("NaN log-potential".into()));
    }
    if logpot == f64::INFINITY {
        return Err(Error::InvalidPotential("+inf log-potential".into()));
    }
    Ok(match kind {
        SemiringKind::Log | SemiringKind::Max | SemiringKind::Sample => Element::Scalar(logpot),
        SemiringKind::Count => Element::Scalar(logpot.exp()),
        SemiringKind::KMax(k) => {
            let mut v = vec![f64::NEG_INFINITY; k];
            v[0] = logpot;
            Element::KMax(v)
        }
        SemiringKind::Expectation => {
            if logpot == f64::NEG_INFINITY {
                Element::Expectation {
                    weight: 0.0,
                    moment: 0.0,
                }
            } else {
                let w = logpot.exp();
                Element::Expectation {
                    weight: w,
                    moment: w * feature,
                }
            }
        }
    })
}
