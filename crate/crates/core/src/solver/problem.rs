//! Flat variable layout and augmented-Lagrangian evaluation.

use nalgebra::DMatrix;

use crate::market::{RoutingInstance, TradePlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Activation<'a> {
    /// `eta` free in `[0, 1]` and charged `q_i eta_i`.
    Relaxed,
    /// `eta` frozen to the pattern; inactive markets cannot trade.
    Fixed(&'a [bool]),
}

/// Multipliers of the invariant equalities (`lambda`, one per market) and of
/// the coupling inequalities `y_j - eta b_j <= 0` (`nu`, one per local asset,
/// relaxed mode only).
#[derive(Debug, Clone)]
pub(crate) struct Multipliers {
    pub lambda: Vec<f64>,
    pub nu: Vec<Vec<f64>>,
}

/// Per market the variables are stored as `[x (n_i), y (n_i), eta]`, each
/// inside a box `[lo, hi]`.
pub(crate) struct Problem<'a> {
    pub inst: &'a RoutingInstance,
    pub mode: Activation<'a>,
    pub offsets: Vec<usize>,
    pub len: usize,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    phi_at_reserves: Vec<f64>,
    // scratch
    psi: Vec<f64>,
    grad_u: Vec<f64>,
    z: Vec<f64>,
    grad_phi: Vec<f64>,
}

impl<'a> Problem<'a> {
    pub fn new(inst: &'a RoutingInstance, mode: Activation<'a>, floor: f64) -> Self {
        let mut offsets = Vec::with_capacity(inst.m());
        let mut lo = Vec::new();
        let mut hi = Vec::new();
        let mut width = 0;
        for (i, m) in inst.markets.iter().enumerate() {
            offsets.push(lo.len());
            width = width.max(m.local_dim());
            let (on, eta) = match mode {
                Activation::Relaxed => (true, (0.0, 1.0)),
                Activation::Fixed(p) if p[i] => (true, (1.0, 1.0)),
                Activation::Fixed(_) => (false, (0.0, 0.0)),
            };
            let gate = if on { 1.0 } else { 0.0 };
            for r in m.reserves.iter() {
                lo.push(0.0);
                hi.push(gate * (r - floor).max(0.0));
            }
            for b in &m.bounds {
                lo.push(0.0);
                hi.push(gate * b);
            }
            lo.push(eta.0);
            hi.push(eta.1);
        }
        let phi_at_reserves = inst
            .markets
            .iter()
            .map(|m| {
                m.trade_function
                    .evaluate(&m.reserves)
                    .expect("validated reserves")
            })
            .collect();
        Self {
            inst,
            mode,
            offsets,
            len: lo.len(),
            lo,
            hi,
            phi_at_reserves,
            psi: vec![0.0; inst.n],
            grad_u: vec![0.0; inst.n],
            z: vec![0.0; width],
            grad_phi: vec![0.0; width],
        }
    }

    pub fn is_active(&self, i: usize) -> bool {
        match self.mode {
            Activation::Relaxed => true,
            Activation::Fixed(p) => p[i],
        }
    }

    pub fn relaxed(&self) -> bool {
        matches!(self.mode, Activation::Relaxed)
    }

    pub fn slices(&self, i: usize) -> (usize, usize, usize) {
        let ni = self.inst.markets[i].local_dim();
        let o = self.offsets[i];
        (o, o + ni, o + 2 * ni)
    }

    pub fn clamp(&self, v: &mut [f64]) {
        for ((a, l), h) in v.iter_mut().zip(&self.lo).zip(&self.hi) {
            *a = a.clamp(*l, *h);
        }
    }

    pub fn zero_multipliers(&self) -> Multipliers {
        Multipliers {
            lambda: vec![0.0; self.inst.m()],
            nu: self
                .inst
                .markets
                .iter()
                .map(|m| vec![0.0; if self.relaxed() { m.local_dim() } else { 0 }])
                .collect(),
        }
    }

    fn fill_psi(&mut self, v: &[f64]) {
        self.psi.iter_mut().for_each(|p| *p = 0.0);
        for (i, m) in self.inst.markets.iter().enumerate() {
            let (xo, yo, _) = self.slices(i);
            for (k, &t) in m.tokens.iter().enumerate() {
                self.psi[t] += v[xo + k] - v[yo + k];
            }
        }
    }

    fn fill_z(&mut self, i: usize, v: &[f64]) -> usize {
        let m = &self.inst.markets[i];
        let (xo, yo, _) = self.slices(i);
        let ni = m.local_dim();
        for k in 0..ni {
            self.z[k] = m.reserves[k] + m.gamma * v[yo + k] - v[xo + k];
        }
        ni
    }

    /// Invariant residuals `H_i` and the worst coupling measure
    /// `|min(-c, nu / rho)|`; returns the largest of all of them.
    pub fn violation(&mut self, v: &[f64], mult: &Multipliers, rho: f64, h: &mut [f64]) -> f64 {
        let mut worst = 0.0_f64;
        for i in 0..self.inst.m() {
            if !self.is_active(i) {
                h[i] = 0.0;
                continue;
            }
            let ni = self.fill_z(i, v);
            let m = &self.inst.markets[i];
            h[i] = match m.trade_function.evaluate(&self.z[..ni]) {
                Ok(phi) => phi - self.phi_at_reserves[i],
                Err(_) => f64::INFINITY,
            };
            worst = worst.max(h[i].abs());
            if self.relaxed() {
                let (_, yo, eo) = self.slices(i);
                for k in 0..ni {
                    let c = v[yo + k] - v[eo] * m.bounds[k];
                    worst = worst.max(c.max(-mult.nu[i][k] / rho).abs());
                }
            }
        }
        worst
    }

    /// First-order multiplier update.
    pub fn update(&mut self, v: &[f64], mult: &mut Multipliers, rho: f64, h: &[f64]) {
        for i in 0..self.inst.m() {
            mult.lambda[i] += rho * h[i];
            if self.relaxed() {
                let m = &self.inst.markets[i];
                let (_, yo, eo) = self.slices(i);
                for k in 0..m.local_dim() {
                    let c = v[yo + k] - v[eo] * m.bounds[k];
                    mult.nu[i][k] = (mult.nu[i][k] + rho * c).max(0.0);
                }
            }
        }
    }

    /// Value and gradient of the augmented Lagrangian
    /// `-u(Psi) + <q, eta> + sum lam_i H_i + rho/2 sum H_i^2` plus the
    /// inequality terms `((nu + rho c)_+^2 - nu^2) / (2 rho)`.
    /// Returns `+inf` outside the domain of the trade functions.
    pub fn eval(&mut self, v: &[f64], mult: &Multipliers, rho: f64, grad: &mut [f64]) -> f64 {
        self.fill_psi(v);
        let inst = self.inst;
        let mut f = -inst.utility.value(&self.psi);
        inst.utility.gradient_into(&self.psi, &mut self.grad_u);
        let relaxed = self.relaxed();
        for (i, m) in inst.markets.iter().enumerate() {
            let (xo, yo, eo) = self.slices(i);
            if !self.is_active(i) {
                grad[xo..=eo].iter_mut().for_each(|g| *g = 0.0);
                continue;
            }
            let ni = self.fill_z(i, v);
            let gp = &mut self.grad_phi[..ni];
            let phi = match m.trade_function.gradient_into(&self.z[..ni], gp) {
                Ok(phi) => phi,
                Err(_) => return f64::INFINITY,
            };
            let h = phi - self.phi_at_reserves[i];
            let c = mult.lambda[i] + rho * h;
            f += mult.lambda[i] * h + 0.5 * rho * h * h;
            for (k, &t) in m.tokens.iter().enumerate() {
                grad[xo + k] = -self.grad_u[t] - c * gp[k];
                grad[yo + k] = self.grad_u[t] + m.gamma * c * gp[k];
            }
            grad[eo] = 0.0;
            if relaxed {
                f += m.gas * v[eo];
                grad[eo] = m.gas;
                for k in 0..ni {
                    let nu = mult.nu[i][k];
                    let s = (nu + rho * (v[yo + k] - v[eo] * m.bounds[k])).max(0.0);
                    f += (s * s - nu * nu) / (2.0 * rho);
                    grad[yo + k] += s;
                    grad[eo] -= s * m.bounds[k];
                }
            }
        }
        f
    }

    /// Multipliers that make the zero-trade rows of the Lagrangian gradient
    /// nonnegative at `v`: `lambda_i = -max_j g_j / P_j` and
    /// `nu_j = (gamma alpha P_j - g_j)_+`.
    pub fn multiplier_guess(&mut self, v: &[f64]) -> Multipliers {
        let mut mult = self.zero_multipliers();
        self.fill_psi(v);
        let inst = self.inst;
        let relaxed = self.relaxed();
        inst.utility.gradient_into(&self.psi, &mut self.grad_u);
        for (i, m) in inst.markets.iter().enumerate() {
            if !self.is_active(i) {
                continue;
            }
            let ni = self.fill_z(i, v);
            let gp = &mut self.grad_phi[..ni];
            if m.trade_function.gradient_into(&self.z[..ni], gp).is_err() {
                continue;
            }
            let alpha = m
                .tokens
                .iter()
                .zip(gp.iter())
                .filter(|(_, p)| **p > 0.0)
                .map(|(&t, p)| self.grad_u[t] / p)
                .fold(0.0_f64, f64::max);
            mult.lambda[i] = -alpha;
            if relaxed {
                for (k, &t) in m.tokens.iter().enumerate() {
                    mult.nu[i][k] = (m.gamma * alpha * gp[k] - self.grad_u[t]).max(0.0);
                }
            }
        }
        mult
    }

    /// Hessian of the augmented Lagrangian. The invariant terms use
    /// `M^T (c grad^2 phi + rho grad phi grad phi^T) M` with `z = R + gamma y - x`,
    /// the coupling terms their generalized Hessian `rho a a^T` where the
    /// penalty is on; `grad^2 phi` (and a nonlinear utility's Hessian) come from
    /// central differences of the analytic gradients.
    pub fn hessian(&mut self, v: &[f64], mult: &Multipliers, rho: f64) -> DMatrix<f64> {
        let inst = self.inst;
        let mut hm = DMatrix::zeros(self.len, self.len);
        for (i, m) in inst.markets.iter().enumerate() {
            if !self.is_active(i) {
                continue;
            }
            let (xo, yo, eo) = self.slices(i);
            let ni = self.fill_z(i, v);
            let z: Vec<f64> = self.z[..ni].to_vec();
            let mut gp = vec![0.0; ni];
            let Ok(phi) = m.trade_function.gradient_into(&z, &mut gp) else {
                continue;
            };
            let c = mult.lambda[i] + rho * (phi - self.phi_at_reserves[i]);
            let mut local = DMatrix::zeros(ni, ni);
            let mut zp = z.clone();
            let (mut up, mut dn) = (vec![0.0; ni], vec![0.0; ni]);
            for k in 0..ni {
                let h = 1e-5 * z[k];
                zp[k] = z[k] + h;
                let a = m.trade_function.gradient_into(&zp, &mut up);
                zp[k] = z[k] - h;
                let b = m.trade_function.gradient_into(&zp, &mut dn);
                zp[k] = z[k];
                if a.is_err() || b.is_err() {
                    continue;
                }
                for j in 0..ni {
                    local[(j, k)] = c * (up[j] - dn[j]) / (2.0 * h);
                }
            }
            let local = (&local + local.transpose()) * 0.5;
            for j in 0..ni {
                for k in 0..ni {
                    let e = local[(j, k)] + rho * gp[j] * gp[k];
                    hm[(xo + j, xo + k)] += e;
                    hm[(xo + j, yo + k)] -= m.gamma * e;
                    hm[(yo + j, xo + k)] -= m.gamma * e;
                    hm[(yo + j, yo + k)] += m.gamma * m.gamma * e;
                }
            }
            if self.relaxed() {
                for k in 0..ni {
                    let b = m.bounds[k];
                    if mult.nu[i][k] + rho * (v[yo + k] - v[eo] * b) > 0.0 {
                        hm[(yo + k, yo + k)] += rho;
                        hm[(yo + k, eo)] -= rho * b;
                        hm[(eo, yo + k)] -= rho * b;
                        hm[(eo, eo)] += rho * b * b;
                    }
                }
            }
        }
        if !inst.utility.is_linear() {
            self.add_utility_hessian(v, &mut hm);
        }
        hm
    }

    fn add_utility_hessian(&mut self, v: &[f64], hm: &mut DMatrix<f64>) {
        let inst = self.inst;
        let n = inst.n;
        self.fill_psi(v);
        let psi = self.psi.clone();
        let mut hu = DMatrix::zeros(n, n);
        let (mut up, mut dn) = (vec![0.0; n], vec![0.0; n]);
        let mut p = psi.clone();
        for t in 0..n {
            let h = 1e-6 * psi[t].abs().max(1.0);
            p[t] = psi[t] + h;
            inst.utility.gradient_into(&p, &mut up);
            p[t] = psi[t] - h;
            inst.utility.gradient_into(&p, &mut dn);
            p[t] = psi[t];
            for s in 0..n {
                hu[(s, t)] = (up[s] - dn[s]) / (2.0 * h);
            }
        }
        // (index, token, sign of d Psi / d var)
        let mut vars = Vec::new();
        for (i, m) in inst.markets.iter().enumerate() {
            let (xo, yo, _) = self.slices(i);
            for (k, &t) in m.tokens.iter().enumerate() {
                vars.push((xo + k, t, 1.0));
                vars.push((yo + k, t, -1.0));
            }
        }
        for &(a, ta, sa) in &vars {
            for &(b, tb, sb) in &vars {
                hm[(a, b)] -= 0.5 * (hu[(ta, tb)] + hu[(tb, ta)]) * sa * sb;
            }
        }
    }

    pub fn to_plan(&self, v: &[f64]) -> TradePlan {
        let mut plan = TradePlan::zero(self.inst);
        for (i, m) in self.inst.markets.iter().enumerate() {
            let (xo, yo, eo) = self.slices(i);
            let ni = m.local_dim();
            plan.x[i].copy_from_slice(&v[xo..xo + ni]);
            plan.y[i].copy_from_slice(&v[yo..yo + ni]);
            plan.eta[i] = v[eo];
        }
        plan
    }

    pub fn phi_at_reserves(&self, i: usize) -> f64 {
        self.phi_at_reserves[i]
    }
}
