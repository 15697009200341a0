//! Sparse factor-graph nonlinear least squares.
//!
//! Gauss-Newton on Σ ρ(‖√Ω·r‖) with the normal equations assembled by
//! variable blocks and solved by a sparse Cholesky factorization (fill-reducing
//! ordering). Huber factors are reweighted each iteration; switchable factors
//! multiply their whitened residual by a switch variable s ∈ [0, 1] that
//! carries a prior (1 − s)/σ_s.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use faer::linalg::solvers::SolveCore;
use faer::sparse::linalg::solvers::{Llt, SymbolicLlt};
use faer::sparse::{SparseColMat, Triplet};
use faer::{Conj, Mat, Side};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gnss::SatId;

/// Huber threshold on the whitened residual.
pub const HUBER_C: f64 = 1.345;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VariableKey {
    /// Position and clocks at an epoch.
    State(u32),
    /// Cumulative cycle slip of a satellite at an epoch.
    CycleSlip(u32, SatId),
    /// Switch variable of a switchable factor.
    Switch(u32),
}

impl fmt::Display for VariableKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::State(k) => write!(f, "x{k}"),
            Self::CycleSlip(k, sat) => write!(f, "B{k}[{sat}]"),
            Self::Switch(k) => write!(f, "s{k}"),
        }
    }
}

/// Residual function of a factor with analytic Jacobians.
pub trait FactorModel: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;
    /// Residual for the variable values, given in the factor's key order.
    fn residual(&self, x: &[&DVector<f64>]) -> DVector<f64>;
    /// ∂r/∂x_k for every key, `dim × dim(x_k)`.
    fn jacobians(&self, x: &[&DVector<f64>]) -> Vec<DMatrix<f64>>;
}

/// r = x − target.
#[derive(Debug, Clone)]
pub struct PriorModel {
    pub target: DVector<f64>,
}

impl FactorModel for PriorModel {
    fn dim(&self) -> usize {
        self.target.len()
    }
    fn residual(&self, x: &[&DVector<f64>]) -> DVector<f64> {
        x[0] - &self.target
    }
    fn jacobians(&self, _x: &[&DVector<f64>]) -> Vec<DMatrix<f64>> {
        vec![DMatrix::identity(self.target.len(), self.target.len())]
    }
}

/// r = Σ A_k x_k − b.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub a: Vec<DMatrix<f64>>,
    pub b: DVector<f64>,
}

impl FactorModel for LinearModel {
    fn dim(&self) -> usize {
        self.b.len()
    }
    fn residual(&self, x: &[&DVector<f64>]) -> DVector<f64> {
        let mut r = -self.b.clone();
        for (a, xk) in self.a.iter().zip(x) {
            r += a * *xk;
        }
        r
    }
    fn jacobians(&self, _x: &[&DVector<f64>]) -> Vec<DMatrix<f64>> {
        self.a.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Kernel {
    None,
    Huber {
        c: f64,
    },
    /// Residual scaled by the switch variable `switch`, with prior σ `sigma_s`.
    Switchable {
        switch: VariableKey,
        sigma_s: f64,
    },
}

/// Huber IRLS weight for a whitened residual norm.
pub fn huber_weight(r: f64, c: f64) -> f64 {
    let a = r.abs();
    if a <= c {
        1.0
    } else {
        c / a
    }
}

/// Huber ρ: r² inside the threshold, 2c|r| − c² outside.
pub fn huber_rho(r: f64, c: f64) -> f64 {
    let a = r.abs();
    if a <= c {
        a * a
    } else {
        2.0 * c * a - c * c
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("no initial value for {0}")]
    MissingInitial(VariableKey),
    #[error("factor {factor}: {detail}")]
    DimensionMismatch { factor: usize, detail: String },
    #[error("information matrix is not symmetric positive definite")]
    InformationNotSpd,
    #[error("singular normal equations; unconstrained blocks: {}", .blocks.join(", "))]
    Singular { blocks: Vec<String> },
}

#[derive(Debug, Clone)]
pub struct Factor {
    pub keys: Vec<VariableKey>,
    pub model: Arc<dyn FactorModel>,
    /// Upper factor Lᵀ of the information Ω = L·Lᵀ; whitened r_w = Lᵀ·r.
    pub sqrt_info: DMatrix<f64>,
    pub kernel: Kernel,
}

impl Factor {
    pub fn new(
        keys: Vec<VariableKey>,
        model: Arc<dyn FactorModel>,
        information: DMatrix<f64>,
    ) -> Result<Self, SolverError> {
        let n = model.dim();
        if information.nrows() != n || information.ncols() != n {
            return Err(SolverError::DimensionMismatch {
                factor: 0,
                detail: format!(
                    "information {}×{} for residual dim {n}",
                    information.nrows(),
                    information.ncols()
                ),
            });
        }
        if (&information - information.transpose()).amax() > 1e-9 * information.amax().max(1.0) {
            return Err(SolverError::InformationNotSpd);
        }
        let chol = information.cholesky().ok_or(SolverError::InformationNotSpd)?;
        Ok(Self {
            keys,
            model,
            sqrt_info: chol.l().transpose(),
            kernel: Kernel::None,
        })
    }

    /// Factor with scalar information 1/σ².
    pub fn scalar(keys: Vec<VariableKey>, model: Arc<dyn FactorModel>, sigma: f64) -> Result<Self, SolverError> {
        let n = model.dim();
        Self::new(keys, model, DMatrix::identity(n, n) / (sigma * sigma))
    }

    pub fn with_kernel(mut self, kernel: Kernel) -> Self {
        self.kernel = kernel;
        self
    }

    pub fn information(&self) -> DMatrix<f64> {
        self.sqrt_info.transpose() * &self.sqrt_info
    }

    fn inputs<'a>(&self, values: &'a Values) -> Vec<&'a DVector<f64>> {
        self.keys.iter().map(|k| &values.map[k]).collect()
    }

    /// Whitened residual √Ω·r, before any kernel.
    pub fn whitened(&self, values: &Values) -> DVector<f64> {
        &self.sqrt_info * self.model.residual(&self.inputs(values))
    }

    fn switch_value(&self, values: &Values) -> Option<f64> {
        match self.kernel {
            Kernel::Switchable { switch, .. } => Some(values.map[&switch][0]),
            _ => None,
        }
    }

    /// Robustified cost of this factor, switch prior excluded.
    pub fn cost(&self, values: &Values) -> f64 {
        let r = self.whitened(values);
        match self.kernel {
            Kernel::None => r.norm_squared(),
            Kernel::Huber { c } => huber_rho(r.norm(), c),
            Kernel::Switchable { .. } => {
                let s = self.switch_value(values).expect("switch key");
                s * s * r.norm_squared()
            }
        }
    }

    /// Keys of the linear system this factor touches, switch included.
    fn system_keys(&self) -> Vec<VariableKey> {
        let mut k = self.keys.clone();
        if let Kernel::Switchable { switch, .. } = self.kernel {
            k.push(switch);
        }
        k
    }

    /// Residual s·r_w (switchable) or r_w with its Jacobians, switch column
    /// appended for switchable factors; no IRLS weight.
    pub fn composite_linearization(&self, values: &Values) -> (DVector<f64>, Vec<DMatrix<f64>>) {
        let inputs = self.inputs(values);
        let r = &self.sqrt_info * self.model.residual(&inputs);
        let mut jac: Vec<DMatrix<f64>> = self
            .model
            .jacobians(&inputs)
            .into_iter()
            .map(|j| &self.sqrt_info * j)
            .collect();
        if let Kernel::Switchable { .. } = self.kernel {
            let s = self.switch_value(values).expect("switch key");
            for j in &mut jac {
                *j *= s;
            }
            jac.push(DMatrix::from_column_slice(r.len(), 1, r.as_slice()));
            return (r * s, jac);
        }
        (r, jac)
    }

    /// Residual and Jacobians entering the normal equations, Huber factors
    /// scaled by the square root of their IRLS weight.
    fn weighted_linearization(&self, values: &Values) -> (DVector<f64>, Vec<DMatrix<f64>>) {
        let (r, mut jac) = self.composite_linearization(values);
        if let Kernel::Huber { c } = self.kernel {
            let w = huber_weight(r.norm(), c).sqrt();
            for j in &mut jac {
                *j *= w;
            }
            return (r * w, jac);
        }
        (r, jac)
    }
}

/// Variable assignment.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Values {
    pub map: BTreeMap<VariableKey, DVector<f64>>,
}

impl Values {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: VariableKey, v: DVector<f64>) {
        self.map.insert(key, v);
    }

    pub fn get(&self, key: &VariableKey) -> Option<&DVector<f64>> {
        self.map.get(key)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
pub struct FactorGraph {
    pub factors: Vec<Factor>,
}

impl FactorGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, f: Factor) {
        self.factors.push(f);
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    /// Switch variables with their prior σ, one entry per distinct key.
    fn switches(&self) -> BTreeMap<VariableKey, f64> {
        self.factors
            .iter()
            .filter_map(|f| match f.kernel {
                Kernel::Switchable { switch, sigma_s } => Some((switch, sigma_s)),
                _ => None,
            })
            .collect()
    }
}

/// Value of the robustified objective, switch priors included.
pub fn marginal_cost(graph: &FactorGraph, values: &Values) -> f64 {
    let factors: f64 = graph
        .factors
        .par_iter()
        .map(|f| f.cost(values))
        .collect::<Vec<_>>()
        .iter()
        .sum();
    let priors: f64 = graph
        .switches()
        .iter()
        .map(|(k, sigma)| ((1.0 - values.map[k][0]) / sigma).powi(2))
        .sum();
    factors + priors
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub max_iterations: usize,
    /// Converged when the relative cost decrease falls below this.
    pub rel_cost_tol: f64,
    /// Converged when the step norm falls below this.
    pub step_tol: f64,
    /// Abort after this many consecutive iterations without cost decrease.
    pub max_cost_increases: usize,
    pub max_step_halvings: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            rel_cost_tol: 1e-6,
            step_tol: 1e-4,
            max_cost_increases: 5,
            max_step_halvings: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSolution {
    pub values: Values,
    pub cost: f64,
    pub initial_cost: f64,
    /// Accepted Gauss-Newton steps; a final step below `step_tol` that only
    /// confirms convergence is not counted.
    pub iterations: usize,
    pub converged: bool,
    /// Aborted after repeated cost increases; `values` is the best iterate.
    pub diverged: bool,
    /// Cost after each accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
}

struct Layout {
    offsets: BTreeMap<VariableKey, usize>,
    dims: BTreeMap<VariableKey, usize>,
    n: usize,
}

impl Layout {
    fn new(values: &Values) -> Self {
        let mut offsets = BTreeMap::new();
        let mut dims = BTreeMap::new();
        let mut n = 0;
        for (k, v) in &values.map {
            offsets.insert(*k, n);
            dims.insert(*k, v.len());
            n += v.len();
        }
        Self { offsets, dims, n }
    }
}

fn validate(graph: &FactorGraph, values: &Values) -> Result<(), SolverError> {
    for (i, f) in graph.factors.iter().enumerate() {
        for k in f.system_keys() {
            if !values.map.contains_key(&k) {
                return Err(SolverError::MissingInitial(k));
            }
        }
        let inputs = f.inputs(values);
        let jac = f.model.jacobians(&inputs);
        let r = f.model.residual(&inputs);
        if r.len() != f.model.dim() || f.sqrt_info.nrows() != r.len() {
            return Err(SolverError::DimensionMismatch {
                factor: i,
                detail: format!("residual dim {} vs declared {}", r.len(), f.model.dim()),
            });
        }
        if jac.len() != f.keys.len() {
            return Err(SolverError::DimensionMismatch {
                factor: i,
                detail: format!("{} Jacobian blocks for {} keys", jac.len(), f.keys.len()),
            });
        }
        for (j, x) in jac.iter().zip(&inputs) {
            if j.nrows() != r.len() || j.ncols() != x.len() {
                return Err(SolverError::DimensionMismatch {
                    factor: i,
                    detail: format!(
                        "Jacobian {}×{} for residual {} and variable {}",
                        j.nrows(),
                        j.ncols(),
                        r.len(),
                        x.len()
                    ),
                });
            }
        }
        if let Kernel::Switchable { switch, .. } = f.kernel {
            if values.map[&switch].len() != 1 {
                return Err(SolverError::DimensionMismatch {
                    factor: i,
                    detail: format!("switch {switch} must be scalar"),
                });
            }
        }
    }
    Ok(())
}

/// Normal equations H·δ = −g, H given as lower-triangle triplets.
fn assemble(graph: &FactorGraph, values: &Values, layout: &Layout) -> (Vec<Triplet<usize, usize, f64>>, DVector<f64>) {
    let pieces: Vec<(Vec<VariableKey>, DVector<f64>, Vec<DMatrix<f64>>)> = graph
        .factors
        .par_iter()
        .map(|f| {
            let (r, j) = f.weighted_linearization(values);
            (f.system_keys(), r, j)
        })
        .collect();

    let mut triplets = Vec::new();
    let mut g = DVector::zeros(layout.n);
    let push_block = |triplets: &mut Vec<Triplet<usize, usize, f64>>, oa: usize, ob: usize, blk: &DMatrix<f64>| {
        for c in 0..blk.ncols() {
            for r in 0..blk.nrows() {
                let (gr, gc) = (oa + r, ob + c);
                if gr >= gc && blk[(r, c)] != 0.0 {
                    triplets.push(Triplet::new(gr, gc, blk[(r, c)]));
                }
            }
        }
    };
    for (keys, r, jac) in &pieces {
        for (a, ja) in keys.iter().zip(jac) {
            let oa = layout.offsets[a];
            let ga = ja.transpose() * r;
            for (i, v) in ga.iter().enumerate() {
                g[oa + i] += v;
            }
            for (b, jb) in keys.iter().zip(jac) {
                let ob = layout.offsets[b];
                if oa < ob {
                    continue;
                }
                push_block(&mut triplets, oa, ob, &(ja.transpose() * jb));
            }
        }
    }
    for (k, sigma) in graph.switches() {
        let o = layout.offsets[&k];
        let s = values.map[&k][0];
        let r = (1.0 - s) / sigma;
        let j = -1.0 / sigma;
        g[o] += j * r;
        triplets.push(Triplet::new(o, o, j * j));
    }
    (triplets, g)
}

/// Connected components of the variable graph that have no unary factor.
fn unconstrained_blocks(graph: &FactorGraph, values: &Values, diag: &DVector<f64>, layout: &Layout) -> Vec<String> {
    let keys: Vec<VariableKey> = values.map.keys().copied().collect();
    let index: BTreeMap<VariableKey, usize> = keys.iter().enumerate().map(|(i, k)| (*k, i)).collect();
    let mut parent: Vec<usize> = (0..keys.len()).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    let mut anchored = vec![false; keys.len()];
    for f in &graph.factors {
        let ks = f.system_keys();
        if ks.len() == 1 {
            anchored[index[&ks[0]]] = true;
        }
        for w in ks.windows(2) {
            let (a, b) = (find(&mut parent, index[&w[0]]), find(&mut parent, index[&w[1]]));
            parent[a] = b;
        }
    }
    for k in graph.switches().keys() {
        anchored[index[k]] = true;
    }
    let mut root_anchored = vec![false; keys.len()];
    for i in 0..keys.len() {
        let r = find(&mut parent, i);
        root_anchored[r] |= anchored[i];
    }
    let mut out: Vec<String> = Vec::new();
    for (i, k) in keys.iter().enumerate() {
        let o = layout.offsets[k];
        let empty = (0..layout.dims[k]).any(|d| diag[o + d] <= 0.0);
        let r = find(&mut parent, i);
        if empty || !root_anchored[r] {
            out.push(k.to_string());
        }
    }
    if out.is_empty() {
        out.push("rank-deficient combination of connected blocks".into());
    }
    out
}

fn solve_normal(graph: &FactorGraph, values: &Values, layout: &Layout) -> Result<DVector<f64>, SolverError> {
    let (triplets, g) = assemble(graph, values, layout);
    let n = layout.n;
    let mut diag = DVector::zeros(n);
    for t in &triplets {
        if t.row == t.col {
            diag[t.row] += t.val;
        }
    }
    let singular = || SolverError::Singular {
        blocks: unconstrained_blocks(graph, values, &diag, layout),
    };
    if diag.iter().any(|d| *d <= 0.0) {
        return Err(singular());
    }
    let h = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &triplets).map_err(|_| singular())?;
    let sym = SymbolicLlt::try_new(h.symbolic(), Side::Lower).map_err(|_| singular())?;
    let llt = Llt::try_new_with_symbolic(sym, h.as_ref(), Side::Lower).map_err(|_| singular())?;
    let mut rhs = Mat::<f64>::from_fn(n, 1, |i, _| -g[i]);
    llt.solve_in_place_with_conj(Conj::No, rhs.as_mut());
    let mut delta = DVector::from_fn(n, |i, _| rhs[(i, 0)]);
    // One step of iterative refinement against the assembled H.
    let mut hd = DVector::<f64>::zeros(n);
    for t in &triplets {
        hd[t.row] += t.val * delta[t.col];
        if t.row != t.col {
            hd[t.col] += t.val * delta[t.row];
        }
    }
    let mut corr = Mat::<f64>::from_fn(n, 1, |i, _| -g[i] - hd[i]);
    llt.solve_in_place_with_conj(Conj::No, corr.as_mut());
    for i in 0..n {
        delta[i] += corr[(i, 0)];
    }
    if delta.iter().any(|v| !v.is_finite()) {
        return Err(singular());
    }
    Ok(delta)
}

fn retract(values: &Values, delta: &DVector<f64>, alpha: f64, layout: &Layout) -> Values {
    let mut out = values.clone();
    for (k, v) in out.map.iter_mut() {
        let o = layout.offsets[k];
        for i in 0..v.len() {
            v[i] += alpha * delta[o + i];
        }
        if matches!(k, VariableKey::Switch(_)) {
            v[0] = v[0].clamp(0.0, 1.0);
        }
    }
    out
}

/// Relative cost change treated as rounding noise for sub-tolerance steps.
const COST_ROUNDING_RTOL: f64 = 1e-12;

/// Gauss-Newton with step halving.
pub fn optimize(graph: &FactorGraph, initial: &Values, options: &SolverOptions) -> Result<GraphSolution, SolverError> {
    validate(graph, initial)?;
    let layout = Layout::new(initial);
    let mut x = initial.clone();
    for (k, v) in x.map.iter_mut() {
        if matches!(k, VariableKey::Switch(_)) {
            v[0] = v[0].clamp(0.0, 1.0);
        }
    }
    let initial_cost = marginal_cost(graph, &x);
    let mut cost = initial_cost;
    let mut best = (x.clone(), cost);
    let mut history = vec![cost];
    let mut iterations = 0;
    let mut converged = false;
    let mut diverged = false;
    let mut increases = 0;

    for _ in 0..options.max_iterations {
        if cost == 0.0 {
            converged = true;
            break;
        }
        let delta = solve_normal(graph, &x, &layout)?;
        let step = delta.norm();
        if step < options.step_tol {
            let trial = retract(&x, &delta, 1.0, &layout);
            let c = marginal_cost(graph, &trial);
            // At the optimum a refinement step changes the cost only at the
            // level of summation rounding.
            if c <= cost * (1.0 + COST_ROUNDING_RTOL) {
                x = trial;
                cost = c;
                if c <= best.1 * (1.0 + COST_ROUNDING_RTOL) {
                    best = (x.clone(), c);
                }
            }
            converged = true;
            break;
        }
        let mut accepted = None;
        let mut alpha = 1.0;
        for _ in 0..=options.max_step_halvings {
            let trial = retract(&x, &delta, alpha, &layout);
            let c = marginal_cost(graph, &trial);
            if c <= cost {
                accepted = Some((trial, c));
                break;
            }
            alpha *= 0.5;
        }
        match accepted {
            Some((trial, c)) => {
                let rel = (cost - c) / cost;
                x = trial;
                cost = c;
                iterations += 1;
                increases = 0;
                history.push(c);
                if c < best.1 {
                    best = (x.clone(), c);
                }
                if rel < options.rel_cost_tol || alpha * step < options.step_tol {
                    converged = true;
                    break;
                }
            }
            None => {
                increases += 1;
                x = retract(&x, &delta, 1.0, &layout);
                cost = marginal_cost(graph, &x);
                if increases >= options.max_cost_increases {
                    diverged = true;
                    break;
                }
            }
        }
    }
    if cost < best.1 {
        best = (x, cost);
    }
    Ok(GraphSolution {
        values: best.0,
        cost: best.1,
        initial_cost,
        iterations,
        converged,
        diverged,
        cost_history: history,
    })
}

/// Largest relative deviation between a factor's analytic Jacobians (switch
/// composite included) and central finite differences.
pub fn jacobian_check(factor: &Factor, values: &Values, step: f64) -> f64 {
    let (_, analytic) = factor.composite_linearization(values);
    let keys = factor.system_keys();
    let mut worst: f64 = 0.0;
    for (key, ja) in keys.iter().zip(&analytic) {
        let mut fd = DMatrix::zeros(ja.nrows(), ja.ncols());
        for c in 0..ja.ncols() {
            let mut plus = values.clone();
            let mut minus = values.clone();
            plus.map.get_mut(key).expect("key present")[c] += step;
            minus.map.get_mut(key).expect("key present")[c] -= step;
            let rp = effective_residual(factor, &plus);
            let rm = effective_residual(factor, &minus);
            fd.set_column(c, &((rp - rm) / (2.0 * step)));
        }
        let scale = ja.norm().max(fd.norm()).max(1e-12);
        worst = worst.max((ja - fd).norm() / scale);
    }
    worst
}

fn effective_residual(factor: &Factor, values: &Values) -> DVector<f64> {
    let r = factor.whitened(values);
    match factor.kernel {
        Kernel::Switchable { .. } => r * factor.switch_value(values).expect("switch key"),
        _ => r,
    }
}

/// All keys referenced by the graph.
pub fn referenced_keys(graph: &FactorGraph) -> BTreeSet<VariableKey> {
    graph.factors.iter().flat_map(|f| f.system_keys()).collect()
}
