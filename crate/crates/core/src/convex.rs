//! Small dense log-barrier interior-point solver.
//!
//! Handles problems of the form
//!
//! ```text
//! minimize    c.x + sum_k w_k / (a_k.x) + const
//! subject to  g_j.x <= b_j                 (affine rows)
//!             1 / x_e - q_e.x <= 0         (reciprocal rows)
//! ```
//!
//! which covers both the explicit stationary program (epigraph form with
//! `eta`) and the restricted mixture problem used for primal recovery.
//! A phase-one problem finds a strictly feasible point.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Sparse affine row `coef . x <= rhs`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AffineRow {
    pub idx: Vec<usize>,
    pub val: Vec<f64>,
    pub rhs: f64,
}

impl AffineRow {
    pub fn new(rhs: f64) -> Self {
        AffineRow { idx: Vec::new(), val: Vec::new(), rhs }
    }

    pub fn push(&mut self, i: usize, v: f64) {
        if v != 0.0 {
            self.idx.push(i);
            self.val.push(v);
        }
    }

    pub fn dot(&self, x: &[f64]) -> f64 {
        self.idx.iter().zip(&self.val).map(|(&i, v)| v * x[i]).sum()
    }

    /// `rhs - coef . x`.
    pub fn slack(&self, x: &[f64]) -> f64 {
        self.rhs - self.dot(x)
    }

    pub fn is_trivial(&self) -> bool {
        self.idx.is_empty()
    }
}

/// `1 / x[eta] <= row.x`, i.e. `1 / x[eta] - row.x <= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReciprocalRow {
    pub eta: usize,
    pub row: AffineRow,
}

impl ReciprocalRow {
    fn slack(&self, x: &[f64]) -> f64 {
        if x[self.eta] <= 0.0 {
            return f64::NEG_INFINITY;
        }
        self.row.dot(x) - 1.0 / x[self.eta]
    }
}

/// `weight / (row.x)` objective term; requires `row.x > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReciprocalTerm {
    pub weight: f64,
    pub row: AffineRow,
}

#[derive(Debug, Clone, Default)]
pub struct Program {
    pub dim: usize,
    pub linear: Vec<f64>,
    pub constant: f64,
    pub reciprocal_terms: Vec<ReciprocalTerm>,
    pub rows: Vec<AffineRow>,
    pub reciprocal_rows: Vec<ReciprocalRow>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarrierSettings {
    /// Target duality gap, absolute.
    pub gap: f64,
    pub t0: f64,
    pub growth: f64,
    pub max_newton: usize,
}

impl Default for BarrierSettings {
    fn default() -> Self {
        BarrierSettings { gap: 1e-10, t0: 1.0, growth: 20.0, max_newton: 200 }
    }
}

#[derive(Debug, Clone)]
pub struct BarrierSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    /// Multiplier estimates `1 / (t slack)` for the affine rows.
    pub row_duals: Vec<f64>,
    pub reciprocal_duals: Vec<f64>,
    /// Upper bound on the suboptimality of `x`.
    pub gap: f64,
    pub newton_steps: usize,
}

/// Result of the phase-one search.
#[derive(Debug, Clone, PartialEq)]
pub enum Feasibility {
    Strict(Vec<f64>),
    /// Smallest achievable worst-row value; nonnegative means there is no
    /// strictly feasible point.
    Infeasible(f64),
}

impl Program {
    pub fn new(dim: usize) -> Self {
        Program { dim, linear: vec![0.0; dim], ..Default::default() }
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let mut f = self.constant + self.linear.iter().zip(x).map(|(c, v)| c * v).sum::<f64>();
        for t in &self.reciprocal_terms {
            let y = t.row.dot(x);
            if y <= 0.0 {
                return f64::INFINITY;
            }
            f += t.weight / y;
        }
        f
    }

    fn num_constraints(&self) -> usize {
        self.rows.len() + self.reciprocal_rows.len()
    }

    fn strictly_feasible(&self, x: &[f64]) -> bool {
        self.rows.iter().all(|r| r.slack(x) > 0.0)
            && self.reciprocal_rows.iter().all(|r| r.slack(x) > 0.0)
            && self.reciprocal_terms.iter().all(|t| t.row.dot(x) > 0.0)
    }

    /// Barrier value `t f0 - sum log slack`, `+inf` outside the interior.
    fn barrier_value(&self, x: &[f64], t: f64) -> f64 {
        if !self.strictly_feasible(x) {
            return f64::INFINITY;
        }
        let mut v = t * self.objective(x);
        for r in &self.rows {
            v -= r.slack(x).ln();
        }
        for r in &self.reciprocal_rows {
            v -= r.slack(x).ln();
        }
        v
    }

    fn barrier_derivatives(&self, x: &[f64], t: f64) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.dim;
        let mut g = DVector::zeros(n);
        let mut h = DMatrix::zeros(n, n);
        for (gi, c) in g.iter_mut().zip(&self.linear) {
            *gi += t * c;
        }
        for term in &self.reciprocal_terms {
            let y = term.row.dot(x);
            let gs = -t * term.weight / (y * y);
            let hs = 2.0 * t * term.weight / (y * y * y);
            add_row(&mut g, &mut h, &term.row, gs, hs);
        }
        for r in &self.rows {
            let s = r.slack(x);
            add_row(&mut g, &mut h, r, 1.0 / s, 1.0 / (s * s));
        }
        for r in &self.reciprocal_rows {
            // q = 1/x_e - row.x, slack u = -q
            let u = r.slack(x);
            let e = r.eta;
            let xe = x[e];
            let mut grad_q: Vec<(usize, f64)> = r.row.idx.iter().zip(&r.row.val).map(|(&i, &v)| (i, -v)).collect();
            grad_q.push((e, -1.0 / (xe * xe)));
            for &(i, v) in &grad_q {
                g[i] += v / u;
            }
            for &(i, vi) in &grad_q {
                for &(j, vj) in &grad_q {
                    h[(i, j)] += vi * vj / (u * u);
                }
            }
            h[(e, e)] += 2.0 / (xe * xe * xe) / u;
        }
        (g, h)
    }

    /// Minimizes `t f0 + barrier` from a strictly feasible start.
    fn center(&self, x: &mut Vec<f64>, t: f64, max_newton: usize) -> Result<usize> {
        let mut steps = 0;
        let mut val = self.barrier_value(x, t);
        for _ in 0..max_newton {
            let (g, h) = self.barrier_derivatives(x, t);
            let dx = newton_direction(h, &g)?;
            let decrement = -g.dot(&dx);
            steps += 1;
            if decrement / 2.0 <= 1e-11 {
                break;
            }
            let mut step = 1.0;
            let mut accepted = false;
            let mut trial = x.clone();
            for _ in 0..80 {
                for ((ti, xi), di) in trial.iter_mut().zip(x.iter()).zip(dx.iter()) {
                    *ti = xi + step * di;
                }
                let v = self.barrier_value(&trial, t);
                if v.is_finite() && v <= val - 0.25 * step * decrement {
                    accepted = true;
                    val = v;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
            std::mem::swap(x, &mut trial);
            if step * decrement <= 1e-12 {
                break;
            }
        }
        Ok(steps)
    }

    /// Barrier method from a strictly feasible point.
    pub fn solve_from(&self, x0: Vec<f64>, settings: &BarrierSettings) -> Result<BarrierSolution> {
        if !self.strictly_feasible(&x0) {
            return Err(Error::Contract("barrier start is not strictly feasible".into()));
        }
        let m = self.num_constraints().max(1) as f64;
        let mut x = x0;
        let mut t = settings.t0;
        let mut steps = 0;
        loop {
            steps += self.center(&mut x, t, settings.max_newton)?;
            if m / t <= settings.gap {
                break;
            }
            t *= settings.growth;
        }
        let row_duals = self.rows.iter().map(|r| 1.0 / (t * r.slack(&x))).collect();
        let reciprocal_duals = self.reciprocal_rows.iter().map(|r| 1.0 / (t * r.slack(&x))).collect();
        Ok(BarrierSolution { objective: self.objective(&x), x, row_duals, reciprocal_duals, gap: m / t, newton_steps: steps })
    }

    /// Looks for a point where every row holds strictly, starting from `x0`
    /// (which must satisfy `x0[eta] > 0` for every reciprocal row).
    pub fn find_strictly_feasible(&self, x0: &[f64], settings: &BarrierSettings) -> Result<Feasibility> {
        if self.strictly_feasible(x0) {
            return Ok(Feasibility::Strict(x0.to_vec()));
        }
        // Variables (x, s); minimize s subject to every row's violation <= s
        // and s >= -1.
        let n = self.dim;
        let mut p = Program::new(n + 1);
        p.linear[n] = 1.0;
        for r in &self.rows {
            let mut row = r.clone();
            row.push(n, -1.0);
            p.rows.push(row);
        }
        for r in &self.reciprocal_rows {
            let mut row = r.row.clone();
            row.push(n, 1.0);
            p.reciprocal_rows.push(ReciprocalRow { eta: r.eta, row });
        }
        for term in &self.reciprocal_terms {
            let mut row = AffineRow::new(0.0);
            for (&i, &v) in term.row.idx.iter().zip(&term.row.val) {
                row.push(i, -v);
            }
            row.push(n, -1.0);
            p.rows.push(row);
        }
        let mut lower = AffineRow::new(1.0);
        lower.push(n, -1.0);
        p.rows.push(lower);

        let worst = |x: &[f64]| -> f64 {
            let mut w = f64::NEG_INFINITY;
            for r in &self.rows {
                w = w.max(-r.slack(x));
            }
            for r in &self.reciprocal_rows {
                w = w.max(-r.slack(x));
            }
            for term in &self.reciprocal_terms {
                w = w.max(-term.row.dot(x));
            }
            w
        };
        let mut x = x0.to_vec();
        x.push(worst(x0).max(0.0) + 1.0);
        if !p.strictly_feasible(&x) {
            return Err(Error::Contract("phase-one start outside the reciprocal domain".into()));
        }
        let m = p.num_constraints() as f64;
        let mut t = settings.t0;
        loop {
            p.center(&mut x, t, settings.max_newton)?;
            if x[n] < 0.0 {
                x.truncate(n);
                if self.strictly_feasible(&x) {
                    self.pull_in_reciprocal(&mut x);
                    return Ok(Feasibility::Strict(x));
                }
                x.push(worst(&x[..n]).max(-1.0 + 1e-12) + 1e-12);
            }
            if m / t <= settings.gap {
                return Ok(Feasibility::Infeasible(x[n]));
            }
            t *= settings.growth;
        }
    }

    /// The phase-one barrier rewards large `x_e` on reciprocal rows; move
    /// each such coordinate back to twice its smallest feasible value.
    fn pull_in_reciprocal(&self, x: &mut [f64]) {
        for r in &self.reciprocal_rows {
            let q = r.row.dot(x);
            let old = x[r.eta];
            if q > 0.0 && 2.0 / q < old {
                x[r.eta] = 2.0 / q;
                if !self.strictly_feasible(x) {
                    x[r.eta] = old;
                }
            }
        }
    }

    /// Phase one followed by the barrier method.
    pub fn solve(&self, x0: &[f64], settings: &BarrierSettings) -> Result<Option<BarrierSolution>> {
        match self.find_strictly_feasible(x0, settings)? {
            Feasibility::Strict(x) => self.solve_from(x, settings).map(Some),
            Feasibility::Infeasible(_) => Ok(None),
        }
    }
}

fn add_row(g: &mut DVector<f64>, h: &mut DMatrix<f64>, row: &AffineRow, gs: f64, hs: f64) {
    for (&i, &vi) in row.idx.iter().zip(&row.val) {
        g[i] += gs * vi;
        for (&j, &vj) in row.idx.iter().zip(&row.val) {
            h[(i, j)] += hs * vi * vj;
        }
    }
}

fn newton_direction(h: DMatrix<f64>, g: &DVector<f64>) -> Result<DVector<f64>> {
    let n = h.nrows();
    if let Some(ch) = h.clone().cholesky() {
        return Ok(-ch.solve(g));
    }
    let scale = (0..n).map(|i| h[(i, i)].abs()).fold(0.0, f64::max).max(1.0);
    let mut ridge = 1e-14 * scale;
    for _ in 0..30 {
        let mut hr = h.clone();
        for i in 0..n {
            hr[(i, i)] += ridge;
        }
        if let Some(ch) = hr.cholesky() {
            return Ok(-ch.solve(g));
        }
        ridge *= 10.0;
    }
    Err(Error::Domain("barrier Hessian is not positive definite".into()))
}
