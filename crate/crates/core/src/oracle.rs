//! Exact information-theoretic quantities on small discrete distributions.
//!
//! The training losses in this crate are variational surrogates for mutual
//! information terms.  Nothing about their direction ("is this really an
//! upper bound?") can be checked on a trained network, so this module builds
//! the same probabilistic structure out of explicit joint tables small enough
//! to evaluate exactly — and verifies the decomposition and both bound
//! directions numerically.
//!
//! All information quantities are in nats.  `0 ln 0 = 0` throughout.
//!
//! The generative structure mirrors the training setup: a latent source `X`
//! produces two observed modalities `X1, X2`; a label `Y1` depends on both;
//! a message code `K2` is computed from the observations only.  That last
//! arrow is what makes `K2` conditionally independent of `Y1` given
//! `(X1, X2)`, and the whole decomposition below hangs on it:
//!
//! `I(X1,X2; K2) = I(K2; Y1 | X1) + I(K2; X1) + I(K2; X2 | X1, Y1)`

use crate::{CimlError, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Joint distribution over named discrete variables, dense row-major storage.
#[derive(Clone, Debug)]
pub struct DiscreteDistribution {
    vars: Vec<(String, usize)>,
    probs: Vec<f64>,
}

impl DiscreteDistribution {
    /// `vars` pairs each variable name with its alphabet size; `probs` is the
    /// dense joint table in row-major order over the variables as listed.
    pub fn new(vars: Vec<(String, usize)>, probs: Vec<f64>) -> Result<Self> {
        if vars.is_empty() {
            return Err(CimlError::Validation("distribution needs at least one variable".into()));
        }
        for (i, (name, size)) in vars.iter().enumerate() {
            if name.is_empty() || *size == 0 {
                return Err(CimlError::Validation(format!("bad variable declaration {name:?}")));
            }
            if vars[..i].iter().any(|(n, _)| n == name) {
                return Err(CimlError::Validation(format!("duplicate variable {name}")));
            }
        }
        let expect: usize = vars.iter().map(|(_, s)| s).product();
        if probs.len() != expect {
            return Err(CimlError::Validation(format!(
                "table has {} entries, variables imply {}",
                probs.len(),
                expect
            )));
        }
        let mut sum = 0.0;
        for &p in &probs {
            if !p.is_finite() || p < -1e-12 {
                return Err(CimlError::Validation(format!("invalid probability {p}")));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(CimlError::Validation(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(DiscreteDistribution { vars, probs })
    }

    pub fn vars(&self) -> &[(String, usize)] {
        &self.vars
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    fn var_positions(&self, names: &[&str]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(names.len());
        for &n in names {
            let pos = self
                .vars
                .iter()
                .position(|(v, _)| v == n)
                .ok_or_else(|| CimlError::Validation(format!("unknown variable {n}")))?;
            if out.contains(&pos) {
                return Err(CimlError::Validation(format!("variable {n} listed twice")));
            }
            out.push(pos);
        }
        Ok(out)
    }

    fn strides(&self) -> Vec<usize> {
        let mut s = vec![1; self.vars.len()];
        for i in (0..self.vars.len().saturating_sub(1)).rev() {
            s[i] = s[i + 1] * self.vars[i + 1].1;
        }
        s
    }

    /// Marginal over the named variables, keeping this distribution's own
    /// variable order (the order of `keep` does not matter).
    pub fn marginal(&self, keep: &[&str]) -> Result<DiscreteDistribution> {
        let mut positions = self.var_positions(keep)?;
        positions.sort_unstable();
        let out_vars: Vec<(String, usize)> =
            positions.iter().map(|&p| self.vars[p].clone()).collect();
        let out_len: usize = out_vars.iter().map(|(_, s)| s).product();
        let mut out = vec![0.0; out_len];

        let strides = self.strides();
        let mut out_strides = vec![1usize; positions.len()];
        for i in (0..positions.len().saturating_sub(1)).rev() {
            out_strides[i] = out_strides[i + 1] * out_vars[i + 1].1;
        }
        for (cell, &p) in self.probs.iter().enumerate() {
            let mut oi = 0;
            for (j, &pos) in positions.iter().enumerate() {
                let digit = (cell / strides[pos]) % self.vars[pos].1;
                oi += digit * out_strides[j];
            }
            out[oi] += p;
        }
        DiscreteDistribution::new(out_vars, out)
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self.probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
    }

    /// Entropy of the marginal over `vars`.
    pub fn entropy_of(&self, vars: &[&str]) -> Result<f64> {
        Ok(self.marginal(vars)?.entropy())
    }

    /// `I(A; B) = H(A) + H(B) - H(A,B)`, where `A` and `B` are disjoint
    /// variable groups of this joint.
    pub fn mutual_information(&self, a: &[&str], b: &[&str]) -> Result<f64> {
        self.check_disjoint(&[a, b])?;
        let ha = self.entropy_of(a)?;
        let hb = self.entropy_of(b)?;
        let joined = union(a, b);
        let hab = self.entropy_of(&joined)?;
        Ok(ha + hb - hab)
    }

    /// `I(A; B | C) = H(A,C) + H(B,C) - H(A,B,C) - H(C)`.
    /// With an empty `C` this is exactly [`mutual_information`].
    ///
    /// [`mutual_information`]: DiscreteDistribution::mutual_information
    pub fn conditional_mutual_information(
        &self,
        a: &[&str],
        b: &[&str],
        c: &[&str],
    ) -> Result<f64> {
        if c.is_empty() {
            return self.mutual_information(a, b);
        }
        self.check_disjoint(&[a, b, c])?;
        let hac = self.entropy_of(&union(a, c))?;
        let hbc = self.entropy_of(&union(b, c))?;
        let habc = self.entropy_of(&union(&union(a, b), c))?;
        let hc = self.entropy_of(c)?;
        Ok(hac + hbc - habc - hc)
    }

    /// `KL(self || q)` over identical variable layouts.  A cell with
    /// `q = 0 < p` is a support mismatch and reported as an error rather
    /// than infinity.
    pub fn kl_divergence(&self, q: &DiscreteDistribution) -> Result<f64> {
        if self.vars != q.vars {
            return Err(CimlError::Validation("kl_divergence: variable layouts differ".into()));
        }
        let mut kl = 0.0;
        for (i, (&p, &qv)) in self.probs.iter().zip(&q.probs).enumerate() {
            if p <= 0.0 {
                continue;
            }
            if qv <= 0.0 {
                return Err(CimlError::Domain(format!(
                    "kl_divergence: q has zero mass at cell {i} where p = {p}"
                )));
            }
            kl += p * (p / qv).ln();
        }
        Ok(kl)
    }

    fn check_disjoint(&self, groups: &[&[&str]]) -> Result<()> {
        let mut seen: Vec<&str> = Vec::new();
        for g in groups {
            for &n in *g {
                self.var_positions(&[n])?;
                if seen.contains(&n) {
                    return Err(CimlError::Validation(format!(
                        "variable {n} appears in more than one group"
                    )));
                }
                seen.push(n);
            }
        }
        Ok(())
    }
}

fn union<'a>(a: &[&'a str], b: &[&'a str]) -> Vec<&'a str> {
    let mut out = a.to_vec();
    out.extend_from_slice(b);
    out
}

/// Alphabet sizes of the five-variable net.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetSizes {
    pub x: usize,
    pub x1: usize,
    pub x2: usize,
    pub y1: usize,
    pub k2: usize,
}

impl NetSizes {
    pub fn validate(&self) -> Result<()> {
        for (name, s) in [
            ("x", self.x),
            ("x1", self.x1),
            ("x2", self.x2),
            ("y1", self.y1),
            ("k2", self.k2),
        ] {
            if s < 2 {
                return Err(CimlError::Validation(format!("alphabet {name} must have >= 2 symbols")));
            }
        }
        Ok(())
    }
}

/// Five-variable generative model:
/// `p(x, x1, x2, y1, k2) = p(x) p(x1|x) p(x2|x) p(y1|x1,x2) p(k2|x1,x2)`.
///
/// Conditional tables are stored row-per-conditioning-cell; the `(x1, x2)`
/// pair indexes rows as `x1 * n_x2 + x2`.
#[derive(Clone, Debug)]
pub struct DiscreteBayesNet {
    pub sizes: NetSizes,
    pub p_x: Vec<f64>,
    pub p_x1_given_x: Vec<Vec<f64>>,
    pub p_x2_given_x: Vec<Vec<f64>>,
    pub p_y1_given_x1x2: Vec<Vec<f64>>,
    pub p_k2_given_x1x2: Vec<Vec<f64>>,
}

fn dirichlet_row(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    // Dirichlet(1, ..., 1): normalised unit exponentials.
    let mut row: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let sum: f64 = row.iter().sum();
    for v in &mut row {
        *v /= sum;
    }
    row
}

impl DiscreteBayesNet {
    /// Draws every conditional row from a flat Dirichlet.
    pub fn random(rng: &mut ChaCha8Rng, sizes: NetSizes) -> Result<Self> {
        sizes.validate()?;
        let rows = |rng: &mut ChaCha8Rng, n_rows: usize, n: usize| {
            (0..n_rows).map(|_| dirichlet_row(rng, n)).collect::<Vec<_>>()
        };
        Ok(DiscreteBayesNet {
            sizes,
            p_x: dirichlet_row(rng, sizes.x),
            p_x1_given_x: rows(rng, sizes.x, sizes.x1),
            p_x2_given_x: rows(rng, sizes.x, sizes.x2),
            p_y1_given_x1x2: rows(rng, sizes.x1 * sizes.x2, sizes.y1),
            p_k2_given_x1x2: rows(rng, sizes.x1 * sizes.x2, sizes.k2),
        })
    }

    /// Dense joint over `(x, x1, x2, y1, k2)`.
    pub fn joint(&self) -> DiscreteDistribution {
        let s = self.sizes;
        let mut probs = Vec::with_capacity(s.x * s.x1 * s.x2 * s.y1 * s.k2);
        for x in 0..s.x {
            for x1 in 0..s.x1 {
                for x2 in 0..s.x2 {
                    let base = self.p_x[x]
                        * self.p_x1_given_x[x][x1]
                        * self.p_x2_given_x[x][x2];
                    let row = x1 * s.x2 + x2;
                    for y1 in 0..s.y1 {
                        let with_y = base * self.p_y1_given_x1x2[row][y1];
                        for k2 in 0..s.k2 {
                            probs.push(with_y * self.p_k2_given_x1x2[row][k2]);
                        }
                    }
                }
            }
        }
        DiscreteDistribution::new(
            vec![
                ("x".into(), s.x),
                ("x1".into(), s.x1),
                ("x2".into(), s.x2),
                ("y1".into(), s.y1),
                ("k2".into(), s.k2),
            ],
            probs,
        )
        .expect("net joint is a valid distribution")
    }

    /// Joint over the observable variables `(x1, x2, y1, k2)`.
    pub fn observed(&self) -> DiscreteDistribution {
        self.joint().marginal(&["x1", "x2", "y1", "k2"]).expect("marginal of net joint")
    }

    /// Largest cell-wise deviation of the observable joint from the product
    /// `p(k2 | x1, x2) * p(x1, x2, y1)`.  The code variable depends on the
    /// source only through the observations, so this must vanish.
    pub fn factorization_residual(&self) -> f64 {
        let s = self.sizes;
        let obs = self.observed();
        let pxxy = obs.marginal(&["x1", "x2", "y1"]).unwrap();
        let mut worst: f64 = 0.0;
        for x1 in 0..s.x1 {
            for x2 in 0..s.x2 {
                let row = x1 * s.x2 + x2;
                for y1 in 0..s.y1 {
                    let base_idx = (x1 * s.x2 + x2) * s.y1 + y1;
                    let joint_base = base_idx * s.k2;
                    for k2 in 0..s.k2 {
                        let lhs = obs.probs()[joint_base + k2];
                        let rhs = self.p_k2_given_x1x2[row][k2] * pxxy.probs()[base_idx];
                        worst = worst.max((lhs - rhs).abs());
                    }
                }
            }
        }
        worst
    }
}

/// The four terms of the exchange-information decomposition.
#[derive(Clone, Copy, Debug)]
pub struct DecompositionTerms {
    /// `I(X1, X2; K2)` — everything the code carries about the inputs.
    pub i1: f64,
    /// `I(K2; Y1 | X1)` — task-relevant content beyond the first modality.
    pub i2: f64,
    /// `I(K2; X1)` — redundancy with what the receiver already sees.
    pub i3: f64,
    /// `I(K2; X2 | X1, Y1)` — residual modality-specific noise.
    pub i4: f64,
}

impl DecompositionTerms {
    /// `i1 - (i2 + i3 + i4)`; zero (to rounding) for every net of this structure.
    pub fn residual(&self) -> f64 {
        self.i1 - (self.i2 + self.i3 + self.i4)
    }
}

/// Evaluates all four terms exactly on the observable joint.
pub fn decomposition_terms(net: &DiscreteBayesNet) -> Result<DecompositionTerms> {
    let obs = net.observed();
    Ok(DecompositionTerms {
        i1: obs.mutual_information(&["x1", "x2"], &["k2"])?,
        i2: obs.conditional_mutual_information(&["k2"], &["y1"], &["x1"])?,
        i3: obs.mutual_information(&["k2"], &["x1"])?,
        i4: obs.conditional_mutual_information(&["k2"], &["x2"], &["x1", "y1"])?,
    })
}

/// Gap report for the two variational surrogates.
#[derive(Clone, Copy, Debug)]
pub struct BoundReport {
    pub i1: f64,
    pub i2: f64,
    /// `sum_{x1,x2} p(x1,x2) KL(p(k2|x1,x2) || r)` — upper-bounds `i1`.
    pub upper_surrogate: f64,
    /// `E_p[ln q(y1|k2,x1)] + H(Y1|X1)` — lower-bounds `i2`.
    pub lower_surrogate: f64,
}

impl BoundReport {
    pub fn upper_gap(&self) -> f64 {
        self.upper_surrogate - self.i1
    }

    pub fn lower_gap(&self) -> f64 {
        self.i2 - self.lower_surrogate
    }
}

/// Evaluates both surrogates against their exact targets.
///
/// * `reference` — a distribution `r` over the code alphabet, strictly positive.
/// * `readout` — rows `q(y1 | x1, k2)` indexed `x1 * n_k2 + k2`; each row
///   normalised, and positive wherever the joint puts mass.
pub fn verify_bound_directions(
    net: &DiscreteBayesNet,
    reference: &[f64],
    readout: &[Vec<f64>],
) -> Result<BoundReport> {
    let s = net.sizes;
    check_simplex("reference", reference, s.k2)?;
    if readout.len() != s.x1 * s.k2 {
        return Err(CimlError::Validation(format!(
            "readout has {} rows, expected {}",
            readout.len(),
            s.x1 * s.k2
        )));
    }
    for (i, row) in readout.iter().enumerate() {
        check_simplex(&format!("readout row {i}"), row, s.y1)?;
    }

    let obs = net.observed();
    let terms = decomposition_terms(net)?;

    // Upper surrogate: average conditional KL to the fixed reference.
    let p_x1x2 = obs.marginal(&["x1", "x2"])?;
    let mut upper = 0.0;
    for x1 in 0..s.x1 {
        for x2 in 0..s.x2 {
            let w = p_x1x2.probs()[x1 * s.x2 + x2];
            if w == 0.0 {
                continue;
            }
            let row = &net.p_k2_given_x1x2[x1 * s.x2 + x2];
            for k in 0..s.k2 {
                let p = row[k];
                if p <= 0.0 {
                    continue;
                }
                if reference[k] <= 0.0 {
                    return Err(CimlError::Domain(format!(
                        "reference has zero mass at symbol {k} inside the code support"
                    )));
                }
                upper += w * p * (p / reference[k]).ln();
            }
        }
    }

    // Lower surrogate: expected readout log-likelihood plus H(Y1|X1).
    let h_y1_given_x1 = obs.entropy_of(&["x1", "y1"])? - obs.entropy_of(&["x1"])?;
    // obs order is (x1, x2, y1, k2).
    let mut expect_ln_q = 0.0;
    let probs = obs.probs();
    for x1 in 0..s.x1 {
        for x2 in 0..s.x2 {
            for y1 in 0..s.y1 {
                for k2 in 0..s.k2 {
                    let p = probs[((x1 * s.x2 + x2) * s.y1 + y1) * s.k2 + k2];
                    if p <= 0.0 {
                        continue;
                    }
                    let q = readout[x1 * s.k2 + k2][y1];
                    if q <= 0.0 {
                        return Err(CimlError::Domain(format!(
                            "readout row ({x1},{k2}) has zero mass at label {y1} inside support"
                        )));
                    }
                    expect_ln_q += p * q.ln();
                }
            }
        }
    }

    Ok(BoundReport {
        i1: terms.i1,
        i2: terms.i2,
        upper_surrogate: upper,
        lower_surrogate: expect_ln_q + h_y1_given_x1,
    })
}

/// The reference that makes the upper surrogate tight: the code marginal.
pub fn optimal_reference(net: &DiscreteBayesNet) -> Result<Vec<f64>> {
    Ok(net.observed().marginal(&["k2"])?.probs().to_vec())
}

/// The readout that makes the lower surrogate tight: `p(y1 | x1, k2)`.
/// Conditioning cells with zero mass get a uniform row (they never matter).
pub fn optimal_readout(net: &DiscreteBayesNet) -> Result<Vec<Vec<f64>>> {
    let s = net.sizes;
    let obs = net.observed();
    let tri = obs.marginal(&["x1", "y1", "k2"])?; // order (x1, y1, k2)
    let pair = obs.marginal(&["x1", "k2"])?;
    let mut rows = Vec::with_capacity(s.x1 * s.k2);
    for x1 in 0..s.x1 {
        for k2 in 0..s.k2 {
            let denom = pair.probs()[x1 * s.k2 + k2];
            if denom <= 0.0 {
                rows.push(vec![1.0 / s.y1 as f64; s.y1]);
                continue;
            }
            let row: Vec<f64> = (0..s.y1)
                .map(|y1| tri.probs()[(x1 * s.y1 + y1) * s.k2 + k2] / denom)
                .collect();
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Dirichlet-random reference distribution over the code alphabet.
pub fn random_reference(rng: &mut ChaCha8Rng, sizes: NetSizes) -> Vec<f64> {
    dirichlet_row(rng, sizes.k2)
}

/// Dirichlet-random readout rows `q(y1 | x1, k2)`.
pub fn random_readout(rng: &mut ChaCha8Rng, sizes: NetSizes) -> Vec<Vec<f64>> {
    (0..sizes.x1 * sizes.k2).map(|_| dirichlet_row(rng, sizes.y1)).collect()
}

fn check_simplex(what: &str, row: &[f64], n: usize) -> Result<()> {
    if row.len() != n {
        return Err(CimlError::Validation(format!("{what}: length {} != {n}", row.len())));
    }
    let mut sum = 0.0;
    for &v in row {
        if !v.is_finite() || v < 0.0 {
            return Err(CimlError::Validation(format!("{what}: invalid entry {v}")));
        }
        sum += v;
    }
    if (sum - 1.0).abs() > 1e-9 {
        return Err(CimlError::Validation(format!("{what}: sums to {sum}")));
    }
    Ok(())
}
