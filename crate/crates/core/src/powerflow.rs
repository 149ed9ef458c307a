//! Bus admittance assembly and polar Newton–Raphson AC power flow.

use num_complex::Complex;

use crate::grid::{BusKind, Network};
use crate::linalg::DenseMatrix;
use crate::scalar::Scalar;

/// Dense complex bus admittance matrix in per-unit, indexed by bus position.
#[derive(Debug, Clone, PartialEq)]
pub struct Ybus<T> {
    n: usize,
    data: Vec<Complex<T>>,
}

impl<T: Scalar> Ybus<T> {
    fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![Complex::new(T::zero(), T::zero()); n * n],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> Complex<T> {
        self.data[r * self.n + c]
    }

    #[inline]
    fn add(&mut self, r: usize, c: usize, v: Complex<T>) {
        self.data[r * self.n + c] += v;
    }
}

/// Two-port admittances of one branch, tap on the from-side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchAdmittance<T> {
    pub yff: Complex<T>,
    pub yft: Complex<T>,
    pub ytf: Complex<T>,
    pub ytt: Complex<T>,
}

pub fn branch_admittance<T: Scalar>(r: f64, x: f64, b_shunt: f64, tap: T) -> BranchAdmittance<T> {
    let z = Complex::new(T::of(r), T::of(x));
    let y = Complex::new(T::one(), T::zero()) / z;
    let half_b = Complex::new(T::zero(), T::of(b_shunt) / T::of(2.0));
    let tap_c = Complex::new(tap, T::zero());
    BranchAdmittance {
        yff: (y + half_b) / (tap_c * tap_c),
        yft: -y / tap_c,
        ytf: -y / tap_c,
        ytt: y + half_b,
    }
}

/// Effective tap ratio of every branch: LTC taps override the file value.
pub fn branch_taps<T: Scalar>(net: &Network, ltc_taps: &[T]) -> Vec<T> {
    assert_eq!(ltc_taps.len(), net.ltcs.len(), "one tap per LTC");
    let mut taps: Vec<T> = net.branches.iter().map(|b| T::of(b.tap_ratio)).collect();
    for (ltc, &tap) in net.ltcs.iter().zip(ltc_taps) {
        let k = net.branch_position(ltc.branch).expect("validated LTC branch");
        taps[k] = tap;
    }
    taps
}

/// Builds the bus admittance matrix using the network's own branch statuses.
pub fn build_ybus<T: Scalar>(net: &Network, ltc_taps: &[T]) -> Ybus<T> {
    let status: Vec<bool> = net.branches.iter().map(|b| b.in_service).collect();
    build_ybus_with_status(net, ltc_taps, &status)
}

/// Builds the bus admittance matrix with an explicit in-service mask, as used
/// by the simulator after branch trips.
pub fn build_ybus_with_status<T: Scalar>(net: &Network, ltc_taps: &[T], in_service: &[bool]) -> Ybus<T> {
    assert_eq!(in_service.len(), net.branches.len());
    let taps = branch_taps(net, ltc_taps);
    let mut y = Ybus::zeros(net.buses.len());
    for ((br, &on), &tap) in net.branches.iter().zip(in_service).zip(&taps) {
        if !on {
            continue;
        }
        let f = net.bus_position(br.from_bus).expect("validated");
        let t = net.bus_position(br.to_bus).expect("validated");
        let a = branch_admittance(br.r, br.x, br.b_shunt, tap);
        y.add(f, f, a.yff);
        y.add(f, t, a.yft);
        y.add(t, f, a.ytf);
        y.add(t, t, a.ytt);
    }
    y
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Convergence threshold on the largest power mismatch, per-unit.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub flat_start: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 20,
            flat_start: true,
        }
    }
}

/// Per-bus power specification, in MW/Mvar.
///
/// Loads follow the exponential model `p_load · V^alpha_p`,
/// `q_load · V^alpha_q`; exponents of 0 give constant-power loads.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Injection<T> {
    pub kind: BusKind,
    pub v_setpoint: T,
    pub p_gen: T,
    pub q_gen: T,
    pub p_load: T,
    pub q_load: T,
    pub alpha_p: T,
    pub alpha_q: T,
}

impl<T: Scalar> Injection<T> {
    pub fn pq(p_gen: T, q_gen: T, p_load: T, q_load: T) -> Self {
        Self {
            kind: BusKind::PQ,
            v_setpoint: T::one(),
            p_gen,
            q_gen,
            p_load,
            q_load,
            alpha_p: T::zero(),
            alpha_q: T::zero(),
        }
    }

    /// Constant-power injections straight from the network file.
    pub fn from_network(net: &Network) -> Vec<Self> {
        net.buses
            .iter()
            .map(|b| {
                let p_gen: f64 = net
                    .generators
                    .iter()
                    .filter(|g| g.in_service && g.bus == b.id)
                    .map(|g| g.p_gen)
                    .sum();
                Self {
                    kind: b.kind,
                    v_setpoint: T::of(b.v_setpoint.unwrap_or(1.0)),
                    p_gen: T::of(p_gen),
                    q_gen: T::zero(),
                    p_load: T::of(b.p_load),
                    q_load: T::of(b.q_load),
                    alpha_p: T::zero(),
                    alpha_q: T::zero(),
                }
            })
            .collect()
    }

    #[inline]
    fn load_at(&self, v: T) -> (T, T) {
        (self.p_load * v.powf(self.alpha_p), self.q_load * v.powf(self.alpha_q))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchFlow<T> {
    pub p_from: T,
    pub q_from: T,
    pub p_to: T,
    pub q_to: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerFlowSolution<T> {
    pub v_mag: Vec<T>,
    pub v_ang: Vec<T>,
    /// Net injection into the network at each bus, MW.
    pub p_inj: Vec<T>,
    /// Net injection into the network at each bus, Mvar.
    pub q_inj: Vec<T>,
    pub branch_flows: Vec<BranchFlow<T>>,
    pub iterations: usize,
    pub converged: bool,
    /// Largest absolute P/Q mismatch of the final iterate, per-unit.
    pub max_mismatch: T,
}

/// Solves with the network's own branch statuses.
pub fn solve<T: Scalar>(
    net: &Network,
    injections: &[Injection<T>],
    ltc_taps: &[T],
    opts: &SolverOptions,
) -> PowerFlowSolution<T> {
    let status: Vec<bool> = net.branches.iter().map(|b| b.in_service).collect();
    let ybus = build_ybus_with_status(net, ltc_taps, &status);
    solve_with(net, &ybus, &status, ltc_taps, injections, opts, None)
}

/// Full-control entry point. `initial` supplies the starting iterate when
/// `opts.flat_start` is false; without it a flat start is used.
pub fn solve_with<T: Scalar>(
    net: &Network,
    ybus: &Ybus<T>,
    in_service: &[bool],
    ltc_taps: &[T],
    injections: &[Injection<T>],
    opts: &SolverOptions,
    initial: Option<&PowerFlowSolution<T>>,
) -> PowerFlowSolution<T> {
    let n = net.buses.len();
    assert_eq!(injections.len(), n, "one injection per bus");
    let base = T::of(net.mva_base);
    let tol = T::of(opts.tolerance);

    let mut vm: Vec<T> = Vec::with_capacity(n);
    let mut va: Vec<T> = Vec::with_capacity(n);
    match initial {
        Some(sol) if !opts.flat_start => {
            vm.extend_from_slice(&sol.v_mag);
            va.extend_from_slice(&sol.v_ang);
        }
        _ => {
            vm.resize(n, T::one());
            va.resize(n, T::zero());
        }
    }
    for (i, inj) in injections.iter().enumerate() {
        if inj.kind != BusKind::PQ {
            vm[i] = inj.v_setpoint;
        }
    }

    let pvpq: Vec<usize> = (0..n).filter(|&i| injections[i].kind != BusKind::Slack).collect();
    let pq: Vec<usize> = (0..n).filter(|&i| injections[i].kind == BusKind::PQ).collect();
    let mut ang_col = vec![usize::MAX; n];
    for (k, &i) in pvpq.iter().enumerate() {
        ang_col[i] = k;
    }
    let mut mag_col = vec![usize::MAX; n];
    for (k, &i) in pq.iter().enumerate() {
        mag_col[i] = pvpq.len() + k;
    }
    let dim = pvpq.len() + pq.len();

    let mut iterations = 0;
    let mut converged = false;
    let mut max_mis;
    loop {
        let (p, q) = calc_power(ybus, &vm, &va);
        let mut f = vec![T::zero(); dim];
        max_mis = T::zero();
        for &i in &pvpq {
            let (pl, _) = injections[i].load_at(vm[i]);
            let spec = (injections[i].p_gen - pl) / base;
            f[ang_col[i]] = p[i] - spec;
        }
        for &i in &pq {
            let (_, ql) = injections[i].load_at(vm[i]);
            let spec = (injections[i].q_gen - ql) / base;
            f[mag_col[i]] = q[i] - spec;
        }
        let mut finite = true;
        for v in &f {
            if !v.is_finite() {
                finite = false;
            }
            max_mis = max_mis.max(v.abs());
        }
        if !finite {
            max_mis = T::infinity();
            break;
        }
        if max_mis < tol {
            converged = true;
            break;
        }
        if iterations >= opts.max_iterations {
            break;
        }

        let jac = jacobian(ybus, &vm, &va, &p, &q, injections, &pvpq, &pq, &ang_col, &mag_col, base);
        let neg_f: Vec<T> = f.iter().map(|v| -*v).collect();
        let dx = match jac.solve(&neg_f) {
            Some(dx) => dx,
            None => break,
        };
        for &i in &pvpq {
            va[i] += dx[ang_col[i]];
        }
        for &i in &pq {
            vm[i] += dx[mag_col[i]];
        }
        iterations += 1;
        if vm.iter().any(|v| !(*v > T::zero()) || !v.is_finite()) {
            break;
        }
    }

    finish(net, ybus, in_service, ltc_taps, vm, va, iterations, converged, max_mis)
}

/// Calculated injections `S = V · conj(Y V)` in per-unit.
pub fn calc_power<T: Scalar>(ybus: &Ybus<T>, vm: &[T], va: &[T]) -> (Vec<T>, Vec<T>) {
    let n = ybus.dim();
    let v: Vec<Complex<T>> = vm.iter().zip(va).map(|(&m, &a)| Complex::from_polar(m, a)).collect();
    let mut p = vec![T::zero(); n];
    let mut q = vec![T::zero(); n];
    for i in 0..n {
        let mut cur = Complex::new(T::zero(), T::zero());
        for k in 0..n {
            let y = ybus.get(i, k);
            if y.re != T::zero() || y.im != T::zero() {
                cur += y * v[k];
            }
        }
        let s = v[i] * cur.conj();
        p[i] = s.re;
        q[i] = s.im;
    }
    (p, q)
}

#[allow(clippy::too_many_arguments)]
fn jacobian<T: Scalar>(
    ybus: &Ybus<T>,
    vm: &[T],
    va: &[T],
    p: &[T],
    q: &[T],
    inj: &[Injection<T>],
    pvpq: &[usize],
    pq: &[usize],
    ang_col: &[usize],
    mag_col: &[usize],
    base: T,
) -> DenseMatrix<T> {
    let n = vm.len();
    let mut jac = DenseMatrix::zeros(pvpq.len() + pq.len());
    let is_pq = |i: usize| mag_col[i] != usize::MAX;
    let is_pvpq = |i: usize| ang_col[i] != usize::MAX;

    for i in 0..n {
        if !is_pvpq(i) {
            continue;
        }
        let row_p = ang_col[i];
        let row_q = if is_pq(i) { Some(mag_col[i]) } else { None };
        let yii = ybus.get(i, i);
        for k in 0..n {
            let y = ybus.get(i, k);
            if k != i && y.re == T::zero() && y.im == T::zero() {
                continue;
            }
            let (g, b) = (y.re, y.im);
            if k == i {
                let (gii, bii) = (yii.re, yii.im);
                let vi = vm[i];
                jac.add(row_p, ang_col[i], -q[i] - bii * vi * vi);
                if is_pq(i) {
                    let (pl, ql) = (inj[i].p_load / base, inj[i].q_load / base);
                    let dpl = inj[i].alpha_p * pl * vi.powf(inj[i].alpha_p - T::one());
                    let dql = inj[i].alpha_q * ql * vi.powf(inj[i].alpha_q - T::one());
                    jac.add(row_p, mag_col[i], p[i] / vi + gii * vi + dpl);
                    if let Some(rq) = row_q {
                        jac.add(rq, ang_col[i], p[i] - gii * vi * vi);
                        jac.add(rq, mag_col[i], q[i] / vi - bii * vi + dql);
                    }
                }
                continue;
            }
            let th = va[i] - va[k];
            let (s, c) = th.sin_cos();
            let vivk = vm[i] * vm[k];
            if is_pvpq(k) {
                jac.add(row_p, ang_col[k], vivk * (g * s - b * c));
                if let Some(rq) = row_q {
                    jac.add(rq, ang_col[k], -vivk * (g * c + b * s));
                }
            }
            if is_pq(k) {
                jac.add(row_p, mag_col[k], vm[i] * (g * c + b * s));
                if let Some(rq) = row_q {
                    jac.add(rq, mag_col[k], vm[i] * (g * s - b * c));
                }
            }
        }
    }
    jac
}

#[allow(clippy::too_many_arguments)]
fn finish<T: Scalar>(
    net: &Network,
    ybus: &Ybus<T>,
    in_service: &[bool],
    ltc_taps: &[T],
    vm: Vec<T>,
    va: Vec<T>,
    iterations: usize,
    converged: bool,
    max_mismatch: T,
) -> PowerFlowSolution<T> {
    let base = T::of(net.mva_base);
    let (p, q) = calc_power(ybus, &vm, &va);
    let flows = branch_flows(net, in_service, ltc_taps, &vm, &va);
    PowerFlowSolution {
        p_inj: p.iter().map(|&x| x * base).collect(),
        q_inj: q.iter().map(|&x| x * base).collect(),
        branch_flows: flows,
        v_mag: vm,
        v_ang: va,
        iterations,
        converged,
        max_mismatch,
    }
}

/// Branch end flows in MW/Mvar; out-of-service branches report exact zeros.
pub fn branch_flows<T: Scalar>(
    net: &Network,
    in_service: &[bool],
    ltc_taps: &[T],
    vm: &[T],
    va: &[T],
) -> Vec<BranchFlow<T>> {
    let base = T::of(net.mva_base);
    let taps = branch_taps(net, ltc_taps);
    net.branches
        .iter()
        .zip(in_service)
        .zip(&taps)
        .map(|((br, &on), &tap)| {
            if !on {
                return BranchFlow {
                    p_from: T::zero(),
                    q_from: T::zero(),
                    p_to: T::zero(),
                    q_to: T::zero(),
                };
            }
            let f = net.bus_position(br.from_bus).expect("validated");
            let t = net.bus_position(br.to_bus).expect("validated");
            let a = branch_admittance(br.r, br.x, br.b_shunt, tap);
            let vf = Complex::from_polar(vm[f], va[f]);
            let vt = Complex::from_polar(vm[t], va[t]);
            let sf = vf * (a.yff * vf + a.yft * vt).conj();
            let st = vt * (a.ytf * vf + a.ytt * vt).conj();
            BranchFlow {
                p_from: sf.re * base,
                q_from: sf.im * base,
                p_to: st.re * base,
                q_to: st.im * base,
            }
        })
        .collect()
}

/// Largest |ΔP|, |ΔQ| (per-unit) of a solution recomputed from scratch,
/// over the equations the solver enforces.
pub fn recompute_mismatch<T: Scalar>(
    net: &Network,
    ybus: &Ybus<T>,
    injections: &[Injection<T>],
    sol: &PowerFlowSolution<T>,
) -> T {
    let base = T::of(net.mva_base);
    let (p, q) = calc_power(ybus, &sol.v_mag, &sol.v_ang);
    let mut worst = T::zero();
    for (i, inj) in injections.iter().enumerate() {
        let (pl, ql) = inj.load_at(sol.v_mag[i]);
        if inj.kind != BusKind::Slack {
            worst = worst.max((p[i] - (inj.p_gen - pl) / base).abs());
        }
        if inj.kind == BusKind::PQ {
            worst = worst.max((q[i] - (inj.q_gen - ql) / base).abs());
        }
    }
    worst
}
