use crate::error::{Error, Result};
use crate::grid::HyperRect;
use crate::matexp::expm;
use ndarray::{Array1, Array2};
use serde::Deserialize;

/// Number of RK4 substeps per sampling interval.
const RK4_SUBSTEPS: usize = 10;

/// Vector fields of the benchmark catalog.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dynamics {
    Car2D,
    Car3D,
    Car4D,
    Car5D,
    InvPendulum,
    Tora,
}

impl Dynamics {
    pub fn state_dim(&self) -> usize {
        match self {
            Dynamics::Car2D | Dynamics::InvPendulum => 2,
            Dynamics::Car3D => 3,
            Dynamics::Car4D | Dynamics::Tora => 4,
            Dynamics::Car5D => 5,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Dynamics::Car2D | Dynamics::Car3D | Dynamics::Car4D | Dynamics::Car5D => 2,
            Dynamics::InvPendulum | Dynamics::Tora => 1,
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Dynamics::Car2D => "car2d",
            Dynamics::Car3D => "car3d",
            Dynamics::Car4D => "car4d",
            Dynamics::Car5D => "car5d",
            Dynamics::InvPendulum => "pendulum",
            Dynamics::Tora => "tora",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Dynamics> {
        match tag {
            "car2d" => Some(Dynamics::Car2D),
            "car3d" => Some(Dynamics::Car3D),
            "car4d" => Some(Dynamics::Car4D),
            "car5d" => Some(Dynamics::Car5D),
            "pendulum" => Some(Dynamics::InvPendulum),
            "tora" => Some(Dynamics::Tora),
            _ => None,
        }
    }

    /// Evaluates the nominal vector field into `out`.
    pub fn eval(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        match self {
            Dynamics::Car2D => {
                out[0] = u[0];
                out[1] = u[1];
            }
            Dynamics::Car3D => {
                out[0] = u[0] * x[2].cos();
                out[1] = u[0] * x[2].sin();
                out[2] = u[1];
            }
            Dynamics::Car4D => {
                out[0] = x[3] * x[2].cos();
                out[1] = x[3] * x[2].sin();
                out[2] = u[0];
                out[3] = u[1];
            }
            Dynamics::Car5D => {
                out[0] = x[3] * x[2].cos();
                out[1] = x[3] * x[2].sin();
                out[2] = x[4];
                out[3] = u[0];
                out[4] = u[1];
            }
            // Pole length L = g and mass m = 8/g^2 collapse the coefficients
            // to sin(x1) + u/8.
            Dynamics::InvPendulum => {
                out[0] = x[1];
                out[1] = x[0].sin() + 0.125 * u[0];
            }
            Dynamics::Tora => {
                out[0] = x[1];
                out[1] = -x[0] + 0.1 * x[2].sin();
                out[2] = x[3];
                out[3] = u[0];
            }
        }
    }
}

/// A benchmark model: nominal dynamics plus everything the growth-bound
/// reachability over-approximation needs.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub name: String,
    pub n: usize,
    pub m: usize,
    pub tau: f64,
    pub state_box: HyperRect,
    pub input_box: HyperRect,
    /// Half-width of the disturbance box W, which is symmetric about the origin.
    pub dist_radius: Vec<f64>,
    pub dynamics: Dynamics,
    /// Componentwise bound on |df_i/dx_j| over the state and input boxes,
    /// hand-derived per model.
    pub growth_matrix: Array2<f64>,
}

impl ModelSpec {
    fn validate(self) -> Result<Self> {
        if self.n != self.dynamics.state_dim() || self.m != self.dynamics.input_dim() {
            return Err(Error::InvalidModel(format!(
                "dimensions ({}, {}) do not match dynamics {}",
                self.n,
                self.m,
                self.dynamics.tag()
            )));
        }
        if self.state_box.dim() != self.n || self.input_box.dim() != self.m {
            return Err(Error::InvalidModel("box dimensions inconsistent".into()));
        }
        if self
            .state_box
            .lo()
            .iter()
            .zip(self.state_box.hi())
            .chain(self.input_box.lo().iter().zip(self.input_box.hi()))
            .any(|(a, b)| !(a < b))
        {
            return Err(Error::InvalidModel("state or input box is empty".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidModel("tau must be positive".into()));
        }
        if self.dist_radius.len() != self.n
            || self.dist_radius.iter().any(|w| !(*w >= 0.0) || !w.is_finite())
        {
            return Err(Error::InvalidModel("dist_radius must be nonnegative".into()));
        }
        if self.growth_matrix.nrows() != self.n
            || self.growth_matrix.ncols() != self.n
            || self.growth_matrix.iter().any(|v| !(*v >= 0.0) || !v.is_finite())
        {
            return Err(Error::InvalidModel(
                "growth matrix must be nonnegative n x n".into(),
            ));
        }
        Ok(self)
    }

    /// The six Table-style catalog models, selectable by name.
    pub fn builtin(name: &str) -> Result<ModelSpec> {
        let spec = match name {
            "car2d" => ModelSpec {
                name: name.into(),
                n: 2,
                m: 2,
                tau: 0.4,
                state_box: HyperRect::new(vec![0.0, 0.0], vec![5.0, 5.0])?,
                input_box: HyperRect::new(vec![-1.0, -1.0], vec![1.0, 1.0])?,
                dist_radius: vec![0.025, 0.025],
                dynamics: Dynamics::Car2D,
                growth_matrix: Array2::zeros((2, 2)),
            },
            "car3d" => ModelSpec {
                name: name.into(),
                n: 3,
                m: 2,
                tau: 0.3,
                state_box: HyperRect::new(vec![0.0, 0.0, -1.6], vec![5.0, 5.0, 1.6])?,
                input_box: HyperRect::new(vec![-1.0, -1.0], vec![1.0, 1.0])?,
                dist_radius: vec![0.0; 3],
                dynamics: Dynamics::Car3D,
                growth_matrix: Array2::from_shape_vec(
                    (3, 3),
                    vec![0., 0., 1., 0., 0., 1., 0., 0., 0.],
                )
                .unwrap(),
            },
            "car4d" => ModelSpec {
                name: name.into(),
                n: 4,
                m: 2,
                tau: 0.5,
                state_box: HyperRect::new(
                    vec![0.0, 0.0, -1.6, -1.0],
                    vec![5.0, 5.0, 1.6, 1.0],
                )?,
                input_box: HyperRect::new(vec![-1.0, -1.0], vec![1.0, 1.0])?,
                dist_radius: vec![0.0; 4],
                dynamics: Dynamics::Car4D,
                growth_matrix: Array2::from_shape_vec(
                    (4, 4),
                    vec![
                        0., 0., 1., 1., //
                        0., 0., 1., 1., //
                        0., 0., 0., 0., //
                        0., 0., 0., 0.,
                    ],
                )
                .unwrap(),
            },
            "car5d" => ModelSpec {
                name: name.into(),
                n: 5,
                m: 2,
                tau: 0.5,
                state_box: HyperRect::new(
                    vec![0.0, 0.0, -1.6, -1.0, -1.0],
                    vec![5.0, 5.0, 1.6, 1.0, 1.0],
                )?,
                input_box: HyperRect::new(vec![-1.0, -1.0], vec![1.0, 1.0])?,
                dist_radius: vec![0.0; 5],
                dynamics: Dynamics::Car5D,
                growth_matrix: Array2::from_shape_vec(
                    (5, 5),
                    vec![
                        0., 0., 1., 1., 0., //
                        0., 0., 1., 1., 0., //
                        0., 0., 0., 0., 1., //
                        0., 0., 0., 0., 0., //
                        0., 0., 0., 0., 0.,
                    ],
                )
                .unwrap(),
            },
            "pendulum" => ModelSpec {
                name: name.into(),
                n: 2,
                m: 1,
                tau: 0.05,
                state_box: HyperRect::new(
                    vec![-std::f64::consts::PI, -2.0],
                    vec![std::f64::consts::PI, 2.0],
                )?,
                input_box: HyperRect::new(vec![-1.0], vec![1.0])?,
                dist_radius: vec![0.0; 2],
                dynamics: Dynamics::InvPendulum,
                growth_matrix: Array2::from_shape_vec((2, 2), vec![0., 1., 1., 0.]).unwrap(),
            },
            "tora" => ModelSpec {
                name: name.into(),
                n: 4,
                m: 1,
                tau: 0.5,
                state_box: HyperRect::new(vec![-2.0; 4], vec![2.0; 4])?,
                input_box: HyperRect::new(vec![-1.0], vec![1.0])?,
                dist_radius: vec![0.0; 4],
                dynamics: Dynamics::Tora,
                growth_matrix: Array2::from_shape_vec(
                    (4, 4),
                    vec![
                        0., 1., 0., 0., //
                        1., 0., 0.1, 0., //
                        0., 0., 0., 1., //
                        0., 0., 0., 0.,
                    ],
                )
                .unwrap(),
            },
            other => {
                return Err(Error::InvalidModel(format!("unknown builtin model `{other}`")))
            }
        };
        spec.validate()
    }

    /// Parses a key-value model configuration (TOML).
    pub fn from_config_str(text: &str) -> Result<ModelSpec> {
        let raw: ModelConfigFile = toml::from_str(text)
            .map_err(|e| Error::InvalidConfig(format!("model config: {e}")))?;
        let dynamics = Dynamics::from_tag(&raw.dynamics)
            .ok_or_else(|| Error::InvalidModel(format!("unknown dynamics `{}`", raw.dynamics)))?;
        let n = dynamics.state_dim();
        if raw.growth_matrix.len() != n || raw.growth_matrix.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidModel("growth matrix must be n x n".into()));
        }
        let growth_matrix = Array2::from_shape_vec(
            (n, n),
            raw.growth_matrix.into_iter().flatten().collect(),
        )
        .map_err(|e| Error::InvalidModel(e.to_string()))?;
        ModelSpec {
            name: raw.name,
            n,
            m: dynamics.input_dim(),
            tau: raw.tau,
            state_box: HyperRect::new(raw.state_lb, raw.state_ub)?,
            input_box: HyperRect::new(raw.input_lb, raw.input_ub)?,
            dist_radius: raw.dist_radius,
            dynamics,
            growth_matrix,
        }
        .validate()
    }

    fn check_args(&self, x: &[f64], u: &[f64]) -> Result<()> {
        if x.len() != self.n {
            return Err(Error::DimensionMismatch { expected: self.n, got: x.len() });
        }
        if u.len() != self.m {
            return Err(Error::DimensionMismatch { expected: self.m, got: u.len() });
        }
        if x.iter().chain(u.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("flow argument"));
        }
        Ok(())
    }

    /// Nominal solution at time `tau` of `dx = f(x, u)` under constant `u`.
    pub fn nominal_flow(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        self.nominal_flow_at(x, u, self.tau)
    }

    /// Nominal solution at an arbitrary horizon `t >= 0`; `t = 0` returns `x`.
    /// The planar car integrates in closed form, everything else runs
    /// fixed-step RK4 with `t / 10` steps.
    pub fn nominal_flow_at(&self, x: &[f64], u: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_args(x, u)?;
        if !(t >= 0.0) || !t.is_finite() {
            return Err(Error::NonFinite("flow horizon"));
        }
        if t == 0.0 {
            return Ok(x.to_vec());
        }
        if self.dynamics == Dynamics::Car2D {
            return Ok(vec![x[0] + t * u[0], x[1] + t * u[1]]);
        }
        let mut state = x.to_vec();
        let h = t / RK4_SUBSTEPS as f64;
        for _ in 0..RK4_SUBSTEPS {
            rk4_step(self.dynamics, &mut state, u, h);
        }
        Ok(state)
    }

    /// Growth bound: returns `r >= r0` such that any trajectory starting
    /// within `r0` (componentwise) of the nominal start stays within `r` of
    /// the nominal flow after `tau`, under any disturbance in W.
    ///
    /// r = exp(L tau) r0 + (int_0^tau exp(L s) ds) w_max, with the integral
    /// read off an augmented matrix exponential so singular L needs no
    /// special treatment.
    pub fn growth_radius(&self, r0: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        if u.len() != self.m {
            return Err(Error::DimensionMismatch { expected: self.m, got: u.len() });
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("growth bound input"));
        }
        if r0.len() != self.n {
            return Err(Error::DimensionMismatch { expected: self.n, got: r0.len() });
        }
        if r0.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidModel("r0 must be nonnegative".into()));
        }
        if self.growth_matrix.iter().all(|v| *v == 0.0) {
            // Zero Jacobian bound degenerates to r0 + tau * w_max exactly.
            return Ok(r0
                .iter()
                .zip(&self.dist_radius)
                .map(|(r, w)| r + self.tau * w)
                .collect());
        }
        let n = self.n;
        let mut aug = Array2::<f64>::zeros((2 * n, 2 * n));
        for i in 0..n {
            for j in 0..n {
                aug[[i, j]] = self.growth_matrix[[i, j]] * self.tau;
            }
            aug[[i, n + i]] = self.tau;
        }
        let e = expm(&aug);
        let r0v = Array1::from_vec(r0.to_vec());
        let wv = Array1::from_vec(self.dist_radius.clone());
        let mut out = vec![0.0; n];
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += e[[i, j]] * r0v[j] + e[[i, n + j]] * wv[j];
            }
            out[i] = acc;
        }
        Ok(out)
    }

    /// Hyper-rectangular over-approximation of the reachable set from a cell
    /// under input `u`: nominal flow of the center, inflated by the growth
    /// radius of the cell radius.
    pub fn reach_rect(&self, cell_center: &[f64], cell_radius: &[f64], u: &[f64]) -> Result<HyperRect> {
        let c = self.nominal_flow(cell_center, u)?;
        let r = self.growth_radius(cell_radius, u)?;
        HyperRect::from_center_radius(&c, &r)
    }

    /// Endpoint of one sampling interval under a piecewise-constant
    /// disturbance, one fresh draw per RK4 substep. Used by the Monte-Carlo
    /// soundness oracle and the closed-loop simulator.
    pub fn disturbed_step(
        &self,
        x: &[f64],
        u: &[f64],
        rng: &mut impl rand::Rng,
    ) -> Result<Vec<f64>> {
        self.check_args(x, u)?;
        let mut state = x.to_vec();
        let h = self.tau / RK4_SUBSTEPS as f64;
        let mut w = vec![0.0; self.n];
        for _ in 0..RK4_SUBSTEPS {
            for (wi, &rad) in w.iter_mut().zip(&self.dist_radius) {
                *wi = if rad > 0.0 { rng.random_range(-rad..=rad) } else { 0.0 };
            }
            rk4_step_disturbed(self.dynamics, &mut state, u, &w, h);
        }
        Ok(state)
    }
}

fn rk4_step(dyn_: Dynamics, state: &mut [f64], u: &[f64], h: f64) {
    let zero = vec![0.0; state.len()];
    rk4_step_disturbed(dyn_, state, u, &zero, h)
}

fn rk4_step_disturbed(dyn_: Dynamics, state: &mut [f64], u: &[f64], w: &[f64], h: f64) {
    let n = state.len();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];

    dyn_.eval(state, u, &mut k1);
    add_w(&mut k1, w);
    for i in 0..n {
        tmp[i] = state[i] + 0.5 * h * k1[i];
    }
    dyn_.eval(&tmp, u, &mut k2);
    add_w(&mut k2, w);
    for i in 0..n {
        tmp[i] = state[i] + 0.5 * h * k2[i];
    }
    dyn_.eval(&tmp, u, &mut k3);
    add_w(&mut k3, w);
    for i in 0..n {
        tmp[i] = state[i] + h * k3[i];
    }
    dyn_.eval(&tmp, u, &mut k4);
    add_w(&mut k4, w);
    for i in 0..n {
        state[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

fn add_w(k: &mut [f64], w: &[f64]) {
    for (ki, wi) in k.iter_mut().zip(w) {
        *ki += wi;
    }
}

#[derive(Deserialize)]
struct ModelConfigFile {
    name: String,
    dynamics: String,
    tau: f64,
    state_lb: Vec<f64>,
    state_ub: Vec<f64>,
    input_lb: Vec<f64>,
    input_ub: Vec<f64>,
    dist_radius: Vec<f64>,
    growth_matrix: Vec<Vec<f64>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn car2d_flow_closed_form() {
        let m = ModelSpec::builtin("car2d").unwrap();
        let y = m.nominal_flow(&[1.0, 1.0], &[0.5, 0.5]).unwrap();
        assert_eq!(y, vec![1.2, 1.2]);
    }

    #[test]
    fn zero_horizon_flow_is_identity() {
        for name in ["car2d", "car3d", "car4d", "car5d", "pendulum", "tora"] {
            let m = ModelSpec::builtin(name).unwrap();
            let x: Vec<f64> = m.state_box.center();
            let u: Vec<f64> = m.input_box.center();
            assert_eq!(m.nominal_flow_at(&x, &u, 0.0).unwrap(), x, "{name}");
        }
    }

    #[test]
    fn car3d_straight_line_matches_analytic() {
        let m = ModelSpec::builtin("car3d").unwrap();
        // Heading stays zero, so the solution is (t, 0, 0).
        let y = m.nominal_flow(&[0.0, 0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert!((y[0] - 0.3).abs() < 1e-9);
        assert!(y[1].abs() < 1e-9 && y[2].abs() < 1e-9);
    }

    #[test]
    fn flow_rejects_bad_input() {
        let m = ModelSpec::builtin("car2d").unwrap();
        assert!(m.nominal_flow(&[f64::NAN, 0.0], &[0.0, 0.0]).is_err());
        assert!(m.nominal_flow(&[0.0], &[0.0, 0.0]).is_err());
        assert!(m.nominal_flow(&[0.0, 0.0], &[0.0]).is_err());
    }

    #[test]
    fn car2d_growth_radius_closed_form() {
        let m = ModelSpec::builtin("car2d").unwrap();
        let r = m.growth_radius(&[0.025, 0.025], &[0.0, 0.0]).unwrap();
        let expect = [0.025 + 0.4 * 0.025, 0.025 + 0.4 * 0.025];
        assert_eq!(r, expect);
        assert!((r[0] - 0.035).abs() < 1e-15);
    }

    #[test]
    fn growth_radius_zero_stays_zero_without_disturbance() {
        let mut m = ModelSpec::builtin("car3d").unwrap();
        m.dist_radius = vec![0.0; 3];
        let r = m.growth_radius(&[0.0; 3], &[1.0, 0.2]).unwrap();
        assert!(r.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn growth_radius_dominates_r0_and_is_monotone() {
        let m = ModelSpec::builtin("car3d").unwrap();
        let u = [1.0, 0.2];
        let r = m.growth_radius(&[0.1, 0.1, 0.1], &u).unwrap();
        assert!(r.iter().all(|v| *v >= 0.1));
        let r_small = m.growth_radius(&[0.05, 0.1, 0.1], &u).unwrap();
        for i in 0..3 {
            assert!(r_small[i] <= r[i] + 1e-15);
        }
        assert!(m.growth_radius(&[-0.1, 0.1, 0.1], &u).is_err());
    }

    #[test]
    fn car2d_reach_rect_bit_exact() {
        let m = ModelSpec::builtin("car2d").unwrap();
        let rect = m.reach_rect(&[1.0, 1.0], &[0.025, 0.025], &[0.5, 0.5]).unwrap();
        let r = 0.025 + 0.4 * 0.025;
        assert_eq!(rect.lo(), &[1.2 - r, 1.2 - r]);
        assert_eq!(rect.hi(), &[1.2 + r, 1.2 + r]);
        assert!((rect.lo()[0] - 1.165).abs() < 1e-12);
        assert!((rect.hi()[0] - 1.235).abs() < 1e-12);
    }

    #[test]
    fn degenerate_reach_rect_is_a_point() {
        let mut m = ModelSpec::builtin("car2d").unwrap();
        m.dist_radius = vec![0.0, 0.0];
        let rect = m.reach_rect(&[1.0, 1.0], &[0.0, 0.0], &[0.5, 0.5]).unwrap();
        assert_eq!(rect.lo(), rect.hi());
        assert_eq!(rect.lo(), &[1.2, 1.2]);
    }

    /// Monte-Carlo soundness oracle: simulated disturbed endpoints from random
    /// starts inside the cell always land inside reach_rect. Run for every
    /// catalog model; must pass 100%.
    #[test]
    fn reach_rect_contains_disturbed_trajectories() {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        for name in ["car2d", "car3d", "car4d", "car5d", "pendulum", "tora"] {
            let m = ModelSpec::builtin(name).unwrap();
            for trial in 0..1000 {
                let radius: Vec<f64> = (0..m.n).map(|_| rng.random_range(0.0..0.1)).collect();
                // Cell center placed so the cell sits inside the state box.
                let center: Vec<f64> = (0..m.n)
                    .map(|i| {
                        let lo = m.state_box.lo()[i] + radius[i];
                        let hi = m.state_box.hi()[i] - radius[i];
                        rng.random_range(lo..=hi)
                    })
                    .collect();
                let u: Vec<f64> = (0..m.m)
                    .map(|i| rng.random_range(m.input_box.lo()[i]..=m.input_box.hi()[i]))
                    .collect();
                let x0: Vec<f64> = (0..m.n)
                    .map(|i| rng.random_range(center[i] - radius[i]..=center[i] + radius[i]))
                    .collect();
                let rect = m.reach_rect(&center, &radius, &u).unwrap();
                let end = m.disturbed_step(&x0, &u, &mut rng).unwrap();
                assert!(
                    rect.contains_point(&end),
                    "{name} trial {trial}: endpoint {end:?} outside {rect:?}"
                );
            }
        }
    }

    #[test]
    fn builtin_matches_config_file_parse() {
        let text = r#"
            name = "car2d"
            dynamics = "car2d"
            tau = 0.4
            state_lb = [0.0, 0.0]
            state_ub = [5.0, 5.0]
            input_lb = [-1.0, -1.0]
            input_ub = [1.0, 1.0]
            dist_radius = [0.025, 0.025]
            growth_matrix = [[0.0, 0.0], [0.0, 0.0]]
        "#;
        let m = ModelSpec::from_config_str(text).unwrap();
        let b = ModelSpec::builtin("car2d").unwrap();
        assert_eq!(m.tau, b.tau);
        assert_eq!(m.state_box, b.state_box);
        assert_eq!(m.dynamics, b.dynamics);
    }

    #[test]
    fn config_rejects_bad_shapes() {
        let text = r#"
            name = "x"
            dynamics = "car2d"
            tau = -0.4
            state_lb = [0.0, 0.0]
            state_ub = [5.0, 5.0]
            input_lb = [-1.0, -1.0]
            input_ub = [1.0, 1.0]
            dist_radius = [0.025, 0.025]
            growth_matrix = [[0.0, 0.0], [0.0, 0.0]]
        "#;
        assert!(ModelSpec::from_config_str(text).is_err());
    }
}
