//! Exact information quantities over finite discrete distributions, and the
//! data-processing check for the aggregate-feature bottleneck.
//!
//! The modeling claim under test: when both the aggregate feature `A` and
//! the encoder output `G` are derived from the same underlying tokens `T`
//! (a common-cause chain `A <- T -> G`), processing `T` down to `A` cannot
//! increase information about `G`, so `I(A;G) <= I(T;G)`; a good aggregate
//! loses at most a small slack, giving the two-sided sandwich
//! `I(T;G) - eps <= I(A;G) <= I(T;G)`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A joint probability table over named finite variables. Stored flat in
/// row-major order with the last variable's index moving fastest.
#[derive(Clone, Debug)]
pub struct DiscreteJoint {
    names: Vec<String>,
    dims: Vec<usize>,
    pmf: Vec<f64>,
}

/// Absolute tolerance for "probabilities sum to one" and factorization
/// checks.
const PROB_TOL: f64 = 1e-12;

impl DiscreteJoint {
    pub fn new(names: Vec<String>, dims: Vec<usize>, pmf: Vec<f64>) -> Result<Self> {
        if names.len() != dims.len() {
            return Err(Error::shape(
                "joint distribution",
                format!("{} dims", names.len()),
                format!("{} dims", dims.len()),
            ));
        }
        if names.is_empty() {
            return Err(Error::InvalidArgument(
                "joint needs at least one variable".into(),
            ));
        }
        for (i, a) in names.iter().enumerate() {
            if names[..i].contains(a) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate variable name {a:?}"
                )));
            }
        }
        if dims.contains(&0) {
            return Err(Error::InvalidArgument(
                "every variable needs at least one value".into(),
            ));
        }
        let cells: usize = dims.iter().product();
        if pmf.len() != cells {
            return Err(Error::shape(
                "joint pmf",
                format!("{cells} cells"),
                format!("{} cells", pmf.len()),
            ));
        }
        if pmf.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(Error::InvalidArgument(
                "pmf entries must be finite and non-negative".into(),
            ));
        }
        let total: f64 = pmf.iter().sum();
        if (total - 1.0).abs() > PROB_TOL {
            return Err(Error::InvalidArgument(format!(
                "pmf must sum to 1, got {total}"
            )));
        }
        Ok(DiscreteJoint { names, dims, pmf })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn pmf(&self) -> &[f64] {
        &self.pmf
    }

    fn var_index(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownVariable(name.to_string()))
    }

    /// Decompose a flat index into per-variable coordinates.
    fn coords(&self, mut flat: usize) -> Vec<usize> {
        let mut out = vec![0; self.dims.len()];
        for k in (0..self.dims.len()).rev() {
            out[k] = flat % self.dims[k];
            flat /= self.dims[k];
        }
        out
    }

    /// Marginal distribution over `vars`, in the requested order.
    pub fn marginal(&self, vars: &[&str]) -> Result<DiscreteJoint> {
        let keep: Vec<usize> = vars
            .iter()
            .map(|v| self.var_index(v))
            .collect::<Result<_>>()?;
        for (i, &k) in keep.iter().enumerate() {
            if keep[..i].contains(&k) {
                return Err(Error::InvalidArgument(format!(
                    "variable {:?} listed twice",
                    vars[i]
                )));
            }
        }
        if keep.is_empty() {
            return Err(Error::InvalidArgument(
                "marginal needs at least one variable".into(),
            ));
        }
        let out_dims: Vec<usize> = keep.iter().map(|&k| self.dims[k]).collect();
        let cells: usize = out_dims.iter().product();
        let mut out = vec![0.0; cells];
        for (flat, &p) in self.pmf.iter().enumerate() {
            let c = self.coords(flat);
            let mut idx = 0;
            for (&k, &d) in keep.iter().zip(out_dims.iter()) {
                idx = idx * d + c[k];
            }
            out[idx] += p;
        }
        DiscreteJoint::new(vars.iter().map(|s| s.to_string()).collect(), out_dims, out)
    }

    /// Shannon entropy in bits; `0 * log 0` is zero.
    pub fn entropy_bits(&self) -> f64 {
        self.pmf
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.log2())
            .sum()
    }
}

/// Mutual information `I(A;B) = H(A) + H(B) - H(A,B)` in bits, where `A`
/// and `B` are disjoint groups of the joint's variables.
pub fn mutual_information(joint: &DiscreteJoint, vars_a: &[&str], vars_b: &[&str]) -> Result<f64> {
    for a in vars_a {
        if vars_b.contains(a) {
            return Err(Error::InvalidArgument(format!(
                "variable {a:?} appears on both sides"
            )));
        }
    }
    let h_a = joint.marginal(vars_a)?.entropy_bits();
    let h_b = joint.marginal(vars_b)?.entropy_bits();
    let both: Vec<&str> = vars_a.iter().chain(vars_b.iter()).copied().collect();
    let h_ab = joint.marginal(&both)?.entropy_bits();
    Ok(h_a + h_b - h_ab)
}

fn validate_stochastic_rows(m: &Tensor, what: &str) -> Result<()> {
    for r in 0..m.rows() {
        let row = m.row(r);
        if row.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "{what}: row {r} has a negative or non-finite entry"
            )));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > PROB_TOL {
            return Err(Error::InvalidArgument(format!(
                "{what}: row {r} sums to {s}, not 1"
            )));
        }
    }
    Ok(())
}

/// Build the common-cause chain `p(T) p(A|T) p(G|T)` as a joint over the
/// variables named `T`, `A`, `G`. Both conditionals are row-stochastic
/// matrices indexed by the value of `T`.
pub fn markov_chain(p_t: &[f64], a_given_t: &Tensor, g_given_t: &Tensor) -> Result<DiscreteJoint> {
    let nt = p_t.len();
    if a_given_t.rows() != nt || g_given_t.rows() != nt {
        return Err(Error::shape(
            "chain conditionals",
            format!("{nt} rows"),
            format!("{} and {} rows", a_given_t.rows(), g_given_t.rows()),
        ));
    }
    if p_t.iter().any(|&p| p < 0.0 || !p.is_finite()) {
        return Err(Error::InvalidArgument(
            "p(T) entries must be non-negative".into(),
        ));
    }
    let s: f64 = p_t.iter().sum();
    if (s - 1.0).abs() > PROB_TOL {
        return Err(Error::InvalidArgument(format!("p(T) sums to {s}, not 1")));
    }
    validate_stochastic_rows(a_given_t, "p(A|T)")?;
    validate_stochastic_rows(g_given_t, "p(G|T)")?;

    let (na, ng) = (a_given_t.cols(), g_given_t.cols());
    let mut pmf = Vec::with_capacity(nt * na * ng);
    for (t, &pt) in p_t.iter().enumerate() {
        for a in 0..na {
            for g in 0..ng {
                pmf.push(pt * a_given_t.get(t, a) * g_given_t.get(t, g));
            }
        }
    }
    DiscreteJoint::new(
        vec!["T".into(), "A".into(), "G".into()],
        vec![nt, na, ng],
        pmf,
    )
}

/// Outcome of a data-processing check on one chain.
#[derive(Clone, Copy, Debug)]
pub struct DpiReport {
    /// Information the full tokens carry about the encoder output.
    pub i_tg: f64,
    /// Information the aggregate carries about the encoder output.
    pub i_ag: f64,
    /// Information the aggregate retains about the tokens.
    pub i_ta: f64,
    /// `I(T;G) - I(A;G)`: how much the aggregation step lost.
    pub gap: f64,
    /// The claimed slack for the two-sided sandwich.
    pub epsilon: f64,
    /// `I(A;G) <= I(T;G)` (up to 1e-12).
    pub dpi_holds: bool,
    /// `I(T;G) - epsilon <= I(A;G) <= I(T;G)` (up to 1e-12).
    pub sandwich_holds: bool,
}

/// Numerical slack granted on the information inequalities themselves.
pub const DPI_TOL: f64 = 1e-12;

/// Verify the data-processing inequality on a joint over `T`, `A`, `G`.
///
/// The joint must factor as a common-cause chain: `A` and `G` conditionally
/// independent given `T`. On such a chain the aggregate `A`, being a
/// processed view of `T`, can carry at most as much information about `G`
/// as `T` itself; `epsilon` is the claimed bound on the loss.
pub fn verify_dpi_chain(joint: &DiscreteJoint, epsilon: f64) -> Result<DpiReport> {
    if epsilon < 0.0 {
        return Err(Error::InvalidArgument(
            "epsilon must be non-negative".into(),
        ));
    }
    // Conditional independence check: p(a,g|t) = p(a|t) p(g|t) wherever
    // p(t) > 0.
    let p_t = joint.marginal(&["T"])?;
    let p_tag = joint.marginal(&["T", "A", "G"])?;
    let p_ta = joint.marginal(&["T", "A"])?;
    let p_tg = joint.marginal(&["T", "G"])?;
    let (nt, na, ng) = (p_tag.dims()[0], p_tag.dims()[1], p_tag.dims()[2]);
    for t in 0..nt {
        let pt = p_t.pmf()[t];
        if pt <= 0.0 {
            continue;
        }
        for a in 0..na {
            for g in 0..ng {
                let joint_val = p_tag.pmf()[(t * na + a) * ng + g];
                let product = p_ta.pmf()[t * na + a] * p_tg.pmf()[t * ng + g] / pt;
                if (joint_val - product).abs() > PROB_TOL {
                    return Err(Error::InvalidArgument(format!(
                        "joint is not a common-cause chain: p(T={t},A={a},G={g}) = {joint_val} \
                         but p(A|T) p(G|T) p(T) = {product}"
                    )));
                }
            }
        }
    }

    let i_tg = mutual_information(joint, &["T"], &["G"])?;
    let i_ag = mutual_information(joint, &["A"], &["G"])?;
    let i_ta = mutual_information(joint, &["T"], &["A"])?;
    let gap = i_tg - i_ag;
    let dpi_holds = i_ag <= i_tg + DPI_TOL;
    let sandwich_holds = dpi_holds && i_tg - epsilon <= i_ag + DPI_TOL;
    Ok(DpiReport {
        i_tg,
        i_ag,
        i_ta,
        gap,
        epsilon,
        dpi_holds,
        sandwich_holds,
    })
}
