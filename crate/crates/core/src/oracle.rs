//! Exact answers for finite chains by dense linear algebra.
//!
//! A [`SubGenerator`] is a rate matrix whose row deficits are kill rates. Resolvents
//! are LU solves of `(αI − Q)u = f`; semigroups use uniformization. Concatenated and
//! revived chains are turned into one larger sub-generator, so every Monte Carlo
//! estimate in this crate has an independent exact counterpart.

use nalgebra::{DMatrix, DVector, LU};

use crate::concat::ConcatenationPlan;
use crate::error::{Error, Result};
use crate::process::FiniteChain;
use crate::state_space::{SpacePoint, Value};
use crate::transfer::KernelSpec;

const ROW_SUM_TOL: f64 = 1e-12;

/// A generator of a killed finite chain: nonnegative off-diagonal rates and
/// `Q_ii = −(Σ_{j≠i} Q_ij + c_i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SubGenerator {
    states: Vec<SpacePoint>,
    matrix: DMatrix<f64>,
}

impl SubGenerator {
    pub fn new(states: Vec<SpacePoint>, matrix: DMatrix<f64>) -> Result<Self> {
        let n = states.len();
        if matrix.nrows() != n || matrix.ncols() != n {
            return Err(Error::config(format!(
                "{n} states but a {}×{} matrix",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        for i in 0..n {
            let mut off = 0.0;
            for j in 0..n {
                let q = matrix[(i, j)];
                if !q.is_finite() {
                    return Err(Error::config(format!("non-finite rate at ({i}, {j})")));
                }
                if i != j {
                    if q < 0.0 {
                        return Err(Error::config(format!("negative rate at ({i}, {j})")));
                    }
                    off += q;
                }
            }
            if matrix[(i, i)] + off > ROW_SUM_TOL * off.max(1.0) {
                return Err(Error::config(format!("row {i} has a positive row sum")));
            }
        }
        Ok(SubGenerator { states, matrix })
    }

    /// The generator of `chain` with its states carrying `tag`.
    pub fn from_chain(chain: &FiniteChain, tag: u32) -> Self {
        let n = chain.labels().len();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            let mut out = chain.kill()[i];
            for j in 0..n {
                if i != j {
                    m[(i, j)] = chain.rates()[i][j];
                    out += chain.rates()[i][j];
                }
            }
            m[(i, i)] = -out;
        }
        SubGenerator {
            states: tagged_states(chain, tag),
            matrix: m,
        }
    }

    pub fn states(&self) -> &[SpacePoint] {
        &self.states
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn index_of(&self, p: &SpacePoint) -> Option<usize> {
        self.states.iter().position(|s| s == p)
    }

    /// Kill rates `c_i = −Σ_j Q_ij`.
    pub fn kill(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.len(),
            self.matrix.row_iter().map(|r| (-r.sum()).max(0.0)),
        )
    }

    /// `(f(x_1), …, f(x_n))`.
    pub fn vector(&self, f: impl Fn(&SpacePoint) -> f64) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.states.iter().map(f))
    }

    /// Rows of the matrix as CSV, headed by the state names.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("state");
        for s in &self.states {
            out.push(',');
            out.push_str(&s.to_string());
        }
        out.push('\n');
        for (i, s) in self.states.iter().enumerate() {
            out.push_str(&s.to_string());
            for j in 0..self.len() {
                out.push_str(&format!(",{}", self.matrix[(i, j)]));
            }
            out.push('\n');
        }
        out
    }
}

fn tagged_states(chain: &FiniteChain, tag: u32) -> Vec<SpacePoint> {
    chain
        .labels()
        .iter()
        .map(|l| SpacePoint::Regular {
            tag,
            value: Value::Label(*l),
        })
        .collect()
}

/// A factorization of `αI − Q` reused across right-hand sides.
pub struct Resolvent {
    a: DMatrix<f64>,
    lu: LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    alpha: f64,
}

impl Resolvent {
    pub fn new(sg: &SubGenerator, alpha: f64) -> Result<Self> {
        Self::on(&sg.matrix, alpha)
    }

    fn on(q: &DMatrix<f64>, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Numeric(format!("alpha = {alpha} must be positive")));
        }
        let n = q.nrows();
        let a = DMatrix::identity(n, n) * alpha - q;
        let lu = a.clone().lu();
        Ok(Resolvent { a, lu, alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `(αI − Q)^{-1} f` with one step of iterative refinement.
    pub fn solve(&self, f: &DVector<f64>) -> Result<DVector<f64>> {
        let singular = || Error::Numeric("singular resolvent system".into());
        let mut u = self.lu.solve(f).ok_or_else(singular)?;
        let r = f - &self.a * &u;
        u += self.lu.solve(&r).ok_or_else(singular)?;
        let r = f - &self.a * &u;
        let scale = self.a.abs().row_sum().max() * u.amax() + f.amax();
        if !(r.amax() <= 1e-12 * scale.max(f64::MIN_POSITIVE)) {
            return Err(Error::Numeric(format!("resolvent residual {} too large", r.amax())));
        }
        Ok(u)
    }
}

/// `U_α f`: the solution of `(αI − Q)u = f`.
pub fn exact_resolvent(sg: &SubGenerator, alpha: f64, f: &DVector<f64>) -> Result<DVector<f64>> {
    Resolvent::new(sg, alpha)?.solve(f)
}

/// `T_t f = e^{tQ} f` by uniformization.
pub fn exact_semigroup(sg: &SubGenerator, t: f64, f: &DVector<f64>) -> Result<DVector<f64>> {
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::domain(format!("time {t} must be finite and nonnegative")));
    }
    let n = sg.len();
    let lambda = (0..n).map(|i| -sg.matrix[(i, i)]).fold(0.0, f64::max);
    if t == 0.0 || lambda == 0.0 {
        return Ok(f.clone());
    }
    // P = I + Q/Λ is substochastic; split t so each Poisson mean stays ≤ 16
    let p = DMatrix::identity(n, n) + &sg.matrix / lambda;
    let steps = (lambda * t / 16.0).ceil().max(1.0) as usize;
    let mean = lambda * t / steps as f64;
    let mut v = f.clone();
    for _ in 0..steps {
        let mut weight = (-mean).exp();
        let mut covered = weight;
        let mut term = v.clone();
        let mut acc = &term * weight;
        let mut k = 0usize;
        while 1.0 - covered > 1e-17 && k < 1_000 {
            k += 1;
            term = &p * &term;
            weight *= mean / k as f64;
            covered += weight;
            acc += &term * weight;
        }
        v = acc;
    }
    Ok(v)
}

/// Kernel rows of `kernel` as a matrix from `source`'s killing states to `targets`.
/// Rows of non-killing states are zero (they are never used).
pub fn kernel_matrix(kernel: &KernelSpec, source: &FiniteChain, targets: &[SpacePoint]) -> Result<DMatrix<f64>> {
    let n = source.labels().len();
    let mut k = DMatrix::zeros(n, targets.len());
    for (i, label) in source.labels().iter().enumerate() {
        if source.kill()[i] == 0.0 {
            continue;
        }
        let row = kernel.row_for(&Value::Label(*label))?;
        for (v, w) in row.to_vec() {
            let j = targets
                .iter()
                .position(|p| p.value() == Some(v))
                .ok_or_else(|| Error::config(format!("kernel target {v} is not a state of the next stage")))?;
            k[(i, j)] += w;
        }
    }
    Ok(k)
}

/// One sub-generator for the first `n_stages` stages of a chain plan: the stage
/// generators on the diagonal, `diag(c^n) K^n` from stage `n` to `n + 1`, and the kill
/// rates of the last included stage left in place.
pub fn assemble_concatenated(plan: &ConcatenationPlan, n_stages: usize) -> Result<SubGenerator> {
    let mut blocks = Vec::new();
    for n in 1..=n_stages {
        let Some(stage) = plan.stage(n) else { break };
        let chain = stage
            .process
            .as_chain()
            .ok_or_else(|| Error::Unsupported(format!("stage {n} is not a finite chain")))?;
        blocks.push((stage, chain, SubGenerator::from_chain(chain, stage.tag)));
    }
    if blocks.is_empty() {
        return Err(Error::config("no stages to assemble"));
    }
    let total: usize = blocks.iter().map(|b| b.2.len()).sum();
    let mut m = DMatrix::zeros(total, total);
    let mut states = Vec::with_capacity(total);
    let mut offset = 0;
    for (i, (stage, chain, sg)) in blocks.iter().enumerate() {
        let size = sg.len();
        m.view_mut((offset, offset), (size, size)).copy_from(&sg.matrix);
        states.extend_from_slice(&sg.states);
        if let (Some(kernel), Some(next)) = (stage.kernel, blocks.get(i + 1)) {
            let k = kernel_matrix(kernel, chain, &next.2.states)?;
            let c = DMatrix::from_diagonal(&DVector::from_column_slice(chain.kill()));
            m.view_mut((offset, offset + size), (size, next.2.len()))
                .copy_from(&(c * k));
        }
        offset += size;
    }
    SubGenerator::new(states, m)
}

/// `Q' = Q_sub + diag(c) K` on the chain's own states: killing replaced by revival.
pub fn assemble_instant_revival(chain: &FiniteChain, kernel: &KernelSpec) -> Result<SubGenerator> {
    let sg = SubGenerator::from_chain(chain, 0);
    let k = kernel_matrix(kernel, chain, &sg.states)?;
    let c = DMatrix::from_diagonal(&DVector::from_column_slice(chain.kill()));
    SubGenerator::new(sg.states.clone(), &sg.matrix + c * k)
}

/// Two copies `{1} × minus` and `{2} × plus` revived into each other through the
/// kernels. Because stage `n` of an alternating plan depends on `n` only through its
/// parity, functions of the untagged state have the same resolvent here as in the
/// countable plan, started from copy 1 (odd) or copy 2 (even).
pub fn assemble_alternating(
    minus: &FiniteChain,
    plus: &FiniteChain,
    kernel_minus: &KernelSpec,
    kernel_plus: &KernelSpec,
) -> Result<SubGenerator> {
    let a = SubGenerator::from_chain(minus, 1);
    let b = SubGenerator::from_chain(plus, 2);
    let (na, nb) = (a.len(), b.len());
    let mut m = DMatrix::zeros(na + nb, na + nb);
    m.view_mut((0, 0), (na, na)).copy_from(&a.matrix);
    m.view_mut((na, na), (nb, nb)).copy_from(&b.matrix);
    let cm = DMatrix::from_diagonal(&DVector::from_column_slice(minus.kill()));
    let cp = DMatrix::from_diagonal(&DVector::from_column_slice(plus.kill()));
    m.view_mut((0, na), (na, nb))
        .copy_from(&(cm * kernel_matrix(kernel_minus, minus, &b.states)?));
    m.view_mut((na, 0), (nb, na))
        .copy_from(&(cp * kernel_matrix(kernel_plus, plus, &a.states)?));
    let mut states = a.states;
    states.extend(b.states);
    SubGenerator::new(states, m)
}

/// The three parts of Dynkin's decomposition at the first entry `τ_A` into a set `A`.
///
/// Vectors run over all states. Off `A` they are solutions of linear systems on the
/// complement `D`; on `A` (where `τ_A = 0`) they hold `0`, `g` and `0`.
#[derive(Clone, Debug, PartialEq)]
pub struct EntryFunctionals {
    /// `E_x ∫_0^{τ_A} e^{-αt} f(X_t) dt`.
    pub integral: DVector<f64>,
    /// `E_x(e^{-ατ_A} g(X_{τ_A}); τ_A < ζ)`.
    pub boundary: DVector<f64>,
    /// `E_x(e^{-αζ} h(X_{ζ−}); ζ < τ_A)`, with `h = Kg` supplied per state.
    pub kill: DVector<f64>,
}

pub fn exact_entry_functionals(
    sg: &SubGenerator,
    alpha: f64,
    absorbing: impl Fn(&SpacePoint) -> bool,
    f: &DVector<f64>,
    g: &DVector<f64>,
    kill_payoff: &DVector<f64>,
) -> Result<EntryFunctionals> {
    let n = sg.len();
    let (inside, outside): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| absorbing(&sg.states[i]));
    if outside.is_empty() {
        return Err(Error::EmptyDomain("the absorbing set covers every state".into()));
    }
    let q_dd = sg.matrix.select_rows(&outside).select_columns(&outside);
    let res = Resolvent::on(&q_dd, alpha)?;
    let f_d = f.select_rows(&outside);
    let c = sg.kill();
    let h_d = DVector::from_iterator(outside.len(), outside.iter().map(|&i| c[i] * kill_payoff[i]));
    let b_d = if inside.is_empty() {
        DVector::zeros(outside.len())
    } else {
        sg.matrix.select_rows(&outside).select_columns(&inside) * g.select_rows(&inside)
    };
    let (u, b, k) = (res.solve(&f_d)?, res.solve(&b_d)?, res.solve(&h_d)?);
    let mut out = EntryFunctionals {
        integral: DVector::zeros(n),
        boundary: DVector::zeros(n),
        kill: DVector::zeros(n),
    };
    for (j, &i) in outside.iter().enumerate() {
        out.integral[i] = u[j];
        out.boundary[i] = b[j];
        out.kill[i] = k[j];
    }
    for &i in &inside {
        out.boundary[i] = g[i];
    }
    Ok(out)
}

/// `(αI − Q)^{-m} f` for `m = 1..=max_power`, sharing one factorization.
pub fn resolvent_powers(sg: &SubGenerator, alpha: f64, f: &DVector<f64>, max_power: usize) -> Result<Vec<DVector<f64>>> {
    let res = Resolvent::new(sg, alpha)?;
    let mut out = Vec::with_capacity(max_power);
    let mut v = f.clone();
    for _ in 0..max_power {
        v = res.solve(&v)?;
        out.push(v.clone());
    }
    Ok(out)
}
