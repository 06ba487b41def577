use crate::domain::{DgMode, DomainChart, MetricFamily, VectorField};
use crate::error::{Error, Result};
use crate::estimate::{ConstantsInputs, VerifyMode, VerifyOptions};
use crate::flow::{Direction, FlowConfig, InitialData, Scheme};
use crate::grid::PeriodicGrid;
use crate::target::{TargetFamily, TargetModel, TensorField, Witness, WitnessShape};
use std::collections::BTreeMap;
use std::path::Path;

/// One fully validated experiment description, parsed from a flat
/// `key = value` file. Unknown keys are hard errors; omitted keys fall back
/// to documented defaults; family names are resolved at load time.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub domain_family: String,
    pub domain_dim: usize,
    pub domain_nodes: usize,
    pub domain_rate: f64,
    pub domain_radius: f64,
    pub domain_dg: DgMode,
    /// Times at which the backward flow inequality and admissibility are
    /// sampled before a backward run.
    pub domain_times: Vec<f64>,
    pub v_family: String,
    pub v_components: Vec<f64>,
    pub v_amplitude: f64,
    pub target_family: String,
    pub target_dim: usize,
    pub target_periods: Option<Vec<f64>>,
    pub tensor_family: String,
    pub tensor_component: (usize, usize, usize),
    pub tensor_value: f64,
    pub tensor_amplitude: f64,
    pub tensor_axis: usize,
    pub witness_shape: Option<String>,
    pub witness_cap: f64,
    pub witness_coeffs: Vec<f64>,
    pub witness_ball_radius: f64,
    pub witness_q: f64,
    pub witness_eps_mode: String,
    pub witness_eps1: f64,
    pub witness_eps2: f64,
    pub witness_samples: usize,
    pub initial_family: String,
    pub initial_value: Vec<f64>,
    pub initial_center: Vec<f64>,
    pub initial_amplitude: f64,
    pub initial_axis: usize,
    pub initial_component: usize,
    pub initial_concentration: f64,
    pub flow: FlowConfig,
    pub estimate_modes: Vec<VerifyMode>,
    pub estimate_r: f64,
    pub estimate_lambdas: Vec<f64>,
    pub estimate_k: f64,
    pub estimate_eps: Option<f64>,
    pub estimate_decay_tol: f64,
    pub cutoff_alpha: f64,
    pub cutoff_samples: usize,
    pub reduced_tau_bars: Vec<f64>,
    pub reduced_probe_radii: Vec<f64>,
    pub reduced_knots: usize,
    pub seed: u64,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            domain_family: "flat_torus".into(),
            domain_dim: 2,
            domain_nodes: 32,
            domain_rate: 0.0,
            domain_radius: 1.0,
            domain_dg: DgMode::Analytic,
            domain_times: vec![0.0],
            v_family: "zero".into(),
            v_components: Vec::new(),
            v_amplitude: 0.0,
            target_family: "euclidean".into(),
            target_dim: 2,
            target_periods: None,
            tensor_family: "zero".into(),
            tensor_component: (0, 0, 0),
            tensor_value: 0.0,
            tensor_amplitude: 0.0,
            tensor_axis: 0,
            witness_shape: None,
            witness_cap: 2.0,
            witness_coeffs: Vec::new(),
            witness_ball_radius: 0.5,
            witness_q: 0.15,
            witness_eps_mode: "sweep".into(),
            witness_eps1: 0.01,
            witness_eps2: 0.01,
            witness_samples: 24,
            initial_family: "constant".into(),
            initial_value: Vec::new(),
            initial_center: Vec::new(),
            initial_amplitude: 0.3,
            initial_axis: 0,
            initial_component: 0,
            initial_concentration: 2.0,
            flow: FlowConfig {
                dt: 1e-3,
                t_end: 1.0,
                direction: Direction::Forward,
                scheme: Scheme::Rk4,
                record_every: 1,
                cfl_safety: 0.9,
            },
            estimate_modes: Vec::new(),
            estimate_r: 4.0,
            estimate_lambdas: Vec::new(),
            estimate_k: 0.0,
            estimate_eps: None,
            estimate_decay_tol: 1e-6,
            cutoff_alpha: 0.75,
            cutoff_samples: crate::cutoff::DEFAULT_SAMPLES,
            reduced_tau_bars: Vec::new(),
            reduced_probe_radii: Vec::new(),
            reduced_knots: 16,
            seed: 42,
        }
    }
}

struct RawEntry {
    value: String,
    line: usize,
    col: usize,
}

fn parse_raw(text: &str) -> Result<BTreeMap<String, RawEntry>> {
    let mut map = BTreeMap::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let without_comment = match raw_line.find('#') {
            Some(p) => &raw_line[..p],
            None => raw_line,
        };
        if without_comment.trim().is_empty() {
            continue;
        }
        let eq = match without_comment.find('=') {
            Some(p) => p,
            None => {
                return Err(Error::Parse {
                    line: line_no,
                    col: without_comment.len(),
                    msg: "expected `key = value`".into(),
                })
            }
        };
        let key = without_comment[..eq].trim().to_string();
        if key.is_empty() {
            return Err(Error::Parse { line: line_no, col: 1, msg: "missing key".into() });
        }
        let value_part = &without_comment[eq + 1..];
        let value = value_part.trim().to_string();
        if value.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                col: eq + 2,
                msg: format!("missing value for `{key}`"),
            });
        }
        let col = eq + 2 + (value_part.len() - value_part.trim_start().len());
        map.insert(key, RawEntry { value, line: line_no, col });
    }
    Ok(map)
}

fn bad_value(entry: &RawEntry, what: &str) -> Error {
    Error::Parse {
        line: entry.line,
        col: entry.col,
        msg: format!("cannot parse `{}` as {what}", entry.value),
    }
}

fn get_f64(entry: &RawEntry) -> Result<f64> {
    entry.value.parse::<f64>().map_err(|_| bad_value(entry, "a number"))
}

fn get_usize(entry: &RawEntry) -> Result<usize> {
    entry.value.parse::<usize>().map_err(|_| bad_value(entry, "a nonnegative integer"))
}

fn get_u64(entry: &RawEntry) -> Result<u64> {
    entry.value.parse::<u64>().map_err(|_| bad_value(entry, "a nonnegative integer"))
}

fn get_list_f64(entry: &RawEntry) -> Result<Vec<f64>> {
    entry
        .value
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| bad_value(entry, "a comma-separated list")))
        .collect()
}

fn get_triple(entry: &RawEntry) -> Result<(usize, usize, usize)> {
    let parts: Vec<&str> = entry.value.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(bad_value(entry, "an index triple i,j,k"));
    }
    let mut idx = [0usize; 3];
    for (slot, part) in idx.iter_mut().zip(&parts) {
        *slot = part.parse::<usize>().map_err(|_| bad_value(entry, "an index triple i,j,k"))?;
    }
    Ok((idx[0], idx[1], idx[2]))
}

impl Scenario {
    pub fn from_text(text: &str) -> Result<Scenario> {
        let raw = parse_raw(text)?;
        let mut sc = Scenario::default();
        for (key, entry) in &raw {
            match key.as_str() {
                "domain.family" => sc.domain_family = entry.value.clone(),
                "domain.dim" => sc.domain_dim = get_usize(entry)?,
                "domain.nodes" => sc.domain_nodes = get_usize(entry)?,
                "domain.rate" => sc.domain_rate = get_f64(entry)?,
                "domain.radius" => sc.domain_radius = get_f64(entry)?,
                "domain.dg" => {
                    sc.domain_dg = match entry.value.as_str() {
                        "analytic" => DgMode::Analytic,
                        "difference" => DgMode::Difference,
                        other => {
                            return Err(Error::invariant(format!(
                                "unresolved metric-rate mode `{other}`"
                            )))
                        }
                    }
                }
                "domain.times" => sc.domain_times = get_list_f64(entry)?,
                "v.family" => sc.v_family = entry.value.clone(),
                "v.components" => sc.v_components = get_list_f64(entry)?,
                "v.amplitude" => sc.v_amplitude = get_f64(entry)?,
                "target.family" => sc.target_family = entry.value.clone(),
                "target.dim" => sc.target_dim = get_usize(entry)?,
                "target.periods" => sc.target_periods = Some(get_list_f64(entry)?),
                "tensor.family" => sc.tensor_family = entry.value.clone(),
                "tensor.component" => sc.tensor_component = get_triple(entry)?,
                "tensor.value" => sc.tensor_value = get_f64(entry)?,
                "tensor.amplitude" => sc.tensor_amplitude = get_f64(entry)?,
                "tensor.axis" => sc.tensor_axis = get_usize(entry)?,
                "witness.f" => sc.witness_shape = Some(entry.value.clone()),
                "witness.cap" => sc.witness_cap = get_f64(entry)?,
                "witness.coeffs" => sc.witness_coeffs = get_list_f64(entry)?,
                "witness.ball_radius" => sc.witness_ball_radius = get_f64(entry)?,
                "witness.q" => sc.witness_q = get_f64(entry)?,
                "witness.eps_mode" => sc.witness_eps_mode = entry.value.clone(),
                "witness.eps1" => sc.witness_eps1 = get_f64(entry)?,
                "witness.eps2" => sc.witness_eps2 = get_f64(entry)?,
                "witness.samples" => sc.witness_samples = get_usize(entry)?,
                "initial.family" => sc.initial_family = entry.value.clone(),
                "initial.value" => sc.initial_value = get_list_f64(entry)?,
                "initial.center" => sc.initial_center = get_list_f64(entry)?,
                "initial.amplitude" => sc.initial_amplitude = get_f64(entry)?,
                "initial.axis" => sc.initial_axis = get_usize(entry)?,
                "initial.component" => sc.initial_component = get_usize(entry)?,
                "initial.concentration" => sc.initial_concentration = get_f64(entry)?,
                "flow.dt" => sc.flow.dt = get_f64(entry)?,
                "flow.t_end" => sc.flow.t_end = get_f64(entry)?,
                "flow.direction" => {
                    sc.flow.direction = match entry.value.as_str() {
                        "forward" => Direction::Forward,
                        "backward" => Direction::Backward,
                        other => {
                            return Err(Error::invariant(format!(
                                "unresolved flow direction `{other}`"
                            )))
                        }
                    }
                }
                "flow.scheme" => {
                    sc.flow.scheme = match entry.value.as_str() {
                        "euler" => Scheme::Euler,
                        "rk4" => Scheme::Rk4,
                        other => {
                            return Err(Error::invariant(format!(
                                "unresolved time scheme `{other}`"
                            )))
                        }
                    }
                }
                "flow.record_every" => sc.flow.record_every = get_usize(entry)?,
                "flow.cfl_safety" => sc.flow.cfl_safety = get_f64(entry)?,
                "estimate.modes" => {
                    sc.estimate_modes = entry
                        .value
                        .split(',')
                        .map(|s| s.trim().parse::<VerifyMode>())
                        .collect::<Result<Vec<_>>>()?;
                }
                "estimate.r" => sc.estimate_r = get_f64(entry)?,
                "estimate.lambdas" => sc.estimate_lambdas = get_list_f64(entry)?,
                "estimate.k" => sc.estimate_k = get_f64(entry)?,
                "estimate.eps" => sc.estimate_eps = Some(get_f64(entry)?),
                "estimate.decay_tol" => sc.estimate_decay_tol = get_f64(entry)?,
                "cutoff.alpha" => sc.cutoff_alpha = get_f64(entry)?,
                "cutoff.samples" => sc.cutoff_samples = get_usize(entry)?,
                "reduced.tau_bars" => sc.reduced_tau_bars = get_list_f64(entry)?,
                "reduced.probe_radii" => sc.reduced_probe_radii = get_list_f64(entry)?,
                "reduced.knots" => sc.reduced_knots = get_usize(entry)?,
                "seed" => sc.seed = get_u64(entry)?,
                _ => return Err(Error::UnknownKey { key: key.clone(), line: entry.line }),
            }
        }
        sc.resolve_names()?;
        Ok(sc)
    }

    pub fn load(path: &Path) -> Result<Scenario> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Parse {
            line: 0,
            col: 0,
            msg: format!("cannot read {}: {e}", path.display()),
        })?;
        Scenario::from_text(&text)
    }

    fn resolve_names(&self) -> Result<()> {
        match self.domain_family.as_str() {
            "flat_torus" | "conformal_torus" | "round_sphere" | "scaled_sphere" => {}
            other => {
                return Err(Error::invariant(format!("unresolved domain family `{other}`")))
            }
        }
        match self.v_family.as_str() {
            "zero" | "constant" | "sine_axis" => {}
            other => return Err(Error::invariant(format!("unresolved drift family `{other}`"))),
        }
        match self.target_family.as_str() {
            "euclidean" | "sphere" | "hyperbolic" => {}
            other => {
                return Err(Error::invariant(format!("unresolved target family `{other}`")))
            }
        }
        match self.tensor_family.as_str() {
            "zero" | "constant" | "sine" => {}
            other => {
                return Err(Error::invariant(format!("unresolved coupling family `{other}`")))
            }
        }
        if let Some(shape) = &self.witness_shape {
            match shape.as_str() {
                "cos_distance" | "quadratic_cap" | "radial_polynomial" => {}
                other => {
                    return Err(Error::invariant(format!("unresolved witness shape `{other}`")))
                }
            }
        }
        match self.witness_eps_mode.as_str() {
            "sweep" | "fixed" => {}
            other => return Err(Error::invariant(format!("unresolved eps mode `{other}`"))),
        }
        match self.initial_family.as_str() {
            "constant" | "identity" | "sine_mode" | "gaussian_bump" => {}
            other => {
                return Err(Error::invariant(format!("unresolved initial family `{other}`")))
            }
        }
        Ok(())
    }

    pub fn build_chart(&self) -> Result<DomainChart> {
        let grid = PeriodicGrid::square(self.domain_dim, self.domain_nodes)?;
        let family = match self.domain_family.as_str() {
            "flat_torus" => MetricFamily::FlatTorus,
            "conformal_torus" => MetricFamily::ConformalTorus { rate: self.domain_rate },
            "round_sphere" => MetricFamily::RoundSphere { radius: self.domain_radius },
            "scaled_sphere" => {
                MetricFamily::ScaledSphere { radius: self.domain_radius, rate: self.domain_rate }
            }
            _ => unreachable!("validated at load"),
        };
        let v = match self.v_family.as_str() {
            "zero" => VectorField::Zero,
            "constant" => {
                if self.v_components.len() != self.domain_dim {
                    return Err(Error::invariant(
                        "drift components must match the domain dimension",
                    ));
                }
                VectorField::Constant(self.v_components.clone())
            }
            "sine_axis" => VectorField::SineAxis { amplitude: self.v_amplitude },
            _ => unreachable!("validated at load"),
        };
        Ok(DomainChart::new(grid, family)?.with_v(v)?.with_dg_mode(self.domain_dg))
    }

    pub fn build_target(&self) -> Result<TargetModel> {
        let family = match self.target_family.as_str() {
            "euclidean" => TargetFamily::Euclidean,
            "sphere" => TargetFamily::Sphere,
            "hyperbolic" => TargetFamily::Hyperbolic,
            _ => unreachable!("validated at load"),
        };
        let model = TargetModel::new(self.target_dim, family)?;
        match &self.target_periods {
            Some(p) => model.with_periods(p.clone()),
            None => Ok(model),
        }
    }

    pub fn build_tensor(&self) -> TensorField {
        let (i, j, k) = self.tensor_component;
        match self.tensor_family.as_str() {
            "zero" => TensorField::Zero,
            "constant" => TensorField::ConstantComponent { i, j, k, value: self.tensor_value },
            "sine" => TensorField::SineComponent {
                i,
                j,
                k,
                amplitude: self.tensor_amplitude,
                axis: self.tensor_axis,
            },
            _ => unreachable!("validated at load"),
        }
    }

    pub fn build_witness(&self) -> Result<Option<Witness>> {
        let shape_name = match &self.witness_shape {
            Some(s) => s,
            None => return Ok(None),
        };
        let shape = match shape_name.as_str() {
            "cos_distance" => WitnessShape::CosDistance,
            "quadratic_cap" => WitnessShape::QuadraticCap { cap: self.witness_cap },
            "radial_polynomial" => {
                WitnessShape::RadialPolynomial { coeffs: self.witness_coeffs.clone() }
            }
            _ => unreachable!("validated at load"),
        };
        Ok(Some(Witness::new(shape, self.witness_ball_radius)?))
    }

    pub fn eps_pairs(&self) -> Vec<(f64, f64)> {
        match self.witness_eps_mode.as_str() {
            "fixed" => vec![(self.witness_eps1, self.witness_eps2)],
            _ => crate::target::default_eps_grid(),
        }
    }

    pub fn build_initial(&self) -> InitialData {
        let center = if self.initial_center.is_empty() {
            vec![0.0; self.target_dim]
        } else {
            self.initial_center.clone()
        };
        match self.initial_family.as_str() {
            "constant" => {
                let value = if self.initial_value.is_empty() {
                    vec![0.0; self.target_dim]
                } else {
                    self.initial_value.clone()
                };
                InitialData::Constant { value }
            }
            "identity" => InitialData::Identity,
            "sine_mode" => InitialData::SineMode {
                component: self.initial_component,
                axis: self.initial_axis,
                center,
                amplitude: self.initial_amplitude,
            },
            "gaussian_bump" => InitialData::GaussianBump {
                component: self.initial_component,
                axis: self.initial_axis,
                center,
                amplitude: self.initial_amplitude,
                concentration: self.initial_concentration,
            },
            _ => unreachable!("validated at load"),
        }
    }

    pub fn verify_options(&self) -> VerifyOptions {
        VerifyOptions {
            lambdas: self.estimate_lambdas.clone(),
            decay_tol: self.estimate_decay_tol,
            variance_tol: 1e-8,
        }
    }

    /// Constants skeleton with everything the scenario pins down directly;
    /// the pipeline fills the measured geometry and certificate fields.
    pub fn constants_inputs(&self) -> ConstantsInputs {
        ConstantsInputs {
            m: self.domain_dim,
            k: self.estimate_k,
            eps1: self.witness_eps1,
            eps2: self.witness_eps2,
            eps: self.estimate_eps,
            r: self.estimate_r,
            lambda: self
                .estimate_lambdas
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max)
                .max(0.0)
                .max(if self.estimate_lambdas.is_empty() { self.flow.t_end } else { 0.0 }),
            q: self.witness_q,
            ..ConstantsInputs::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FULL: &str = "\
# exercise every section
domain.family = conformal_torus
domain.dim = 2
domain.nodes = 48
domain.rate = -0.5
domain.times = 0.0, 0.1, 0.2
v.family = constant
v.components = 0.1, 0.0
target.family = sphere
target.dim = 2
tensor.family = constant
tensor.component = 0, 0, 1
tensor.value = 0.2
witness.f = quadratic_cap
witness.cap = 2.0
witness.ball_radius = 0.5
witness.q = 0.15
witness.eps_mode = sweep
initial.family = sine_mode
initial.amplitude = 0.3
initial.axis = 0
initial.component = 0
flow.dt = 2e-3
flow.t_end = 1.0
flow.direction = forward
flow.scheme = rk4
flow.record_every = 25
estimate.modes = from_initial, windowed
estimate.r = 2.0
estimate.lambdas = 0.25, 0.5, 1.0
cutoff.alpha = 0.75
reduced.tau_bars = 0.5, 1.0
reduced.knots = 16
seed = 7
";

    #[test]
    fn full_scenario_round_trips() {
        let sc = Scenario::from_text(FULL).unwrap();
        assert_eq!(sc.domain_family, "conformal_torus");
        assert_eq!(sc.domain_nodes, 48);
        assert_eq!(sc.domain_rate, -0.5);
        assert_eq!(sc.domain_times, vec![0.0, 0.1, 0.2]);
        assert_eq!(sc.v_components, vec![0.1, 0.0]);
        assert_eq!(sc.tensor_component, (0, 0, 1));
        assert_eq!(sc.witness_shape.as_deref(), Some("quadratic_cap"));
        assert_eq!(sc.flow.record_every, 25);
        assert_eq!(
            sc.estimate_modes,
            vec![VerifyMode::FromInitial, VerifyMode::Windowed]
        );
        assert_eq!(sc.estimate_lambdas, vec![0.25, 0.5, 1.0]);
        assert_eq!(sc.seed, 7);
        let chart = sc.build_chart().unwrap();
        assert_eq!(chart.dim(), 2);
        let target = sc.build_target().unwrap();
        assert_eq!(target.dim, 2);
        assert!(sc.build_witness().unwrap().is_some());
    }

    #[test]
    fn defaults_cover_an_empty_file() {
        let sc = Scenario::from_text("# nothing but comments\n\n").unwrap();
        assert_eq!(sc.domain_family, "flat_torus");
        assert_eq!(sc.domain_nodes, 32);
        assert_eq!(sc.flow.dt, 1e-3);
        assert!(sc.witness_shape.is_none());
        assert!(sc.build_witness().unwrap().is_none());
        assert_eq!(sc.seed, 42);
        let init = sc.build_initial();
        assert!(matches!(init, InitialData::Constant { .. }));
    }

    #[test]
    fn unknown_key_is_a_distinct_hard_error() {
        let err = Scenario::from_text("target.famly = euclidean\n").unwrap_err();
        match &err {
            Error::UnknownKey { key, line } => {
                assert_eq!(key, "target.famly");
                assert_eq!(*line, 1);
            }
            other => panic!("expected unknown-key error, got {other:?}"),
        }
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn parse_errors_carry_line_and_column() {
        let err = Scenario::from_text("flow.dt = 2e-3\nflow.t_end = soon\n").unwrap_err();
        match &err {
            Error::Parse { line, col, .. } => {
                assert_eq!(*line, 2);
                assert_eq!(*col, 14);
            }
            other => panic!("expected parse error, got {other:?}"),
        }
        assert_eq!(err.exit_code(), 2);

        let err = Scenario::from_text("flow.dt 2e-3\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn unresolved_family_is_an_invariant_breach() {
        let err = Scenario::from_text("domain.family = moebius\n").unwrap_err();
        assert_eq!(err.exit_code(), 4);
        let err = Scenario::from_text("initial.family = spiral\n").unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn later_entries_override_earlier_ones() {
        let sc = Scenario::from_text("seed = 1\nseed = 9\n").unwrap();
        assert_eq!(sc.seed, 9);
    }

    #[test]
    fn trailing_comments_are_stripped() {
        let sc = Scenario::from_text("flow.dt = 5e-4  # fine step\n").unwrap();
        assert_eq!(sc.flow.dt, 5e-4);
    }

    #[test]
    fn drift_component_count_must_match_dimension() {
        let sc =
            Scenario::from_text("v.family = constant\nv.components = 0.1, 0.2, 0.3\n").unwrap();
        assert!(sc.build_chart().is_err());
    }

    #[test]
    fn constants_inputs_take_the_longest_window() {
        let sc = Scenario::from_text("estimate.lambdas = 0.25, 1.0, 0.5\n").unwrap();
        assert_eq!(sc.constants_inputs().lambda, 1.0);
        let sc = Scenario::from_text("flow.t_end = 3.5\n").unwrap();
        assert_eq!(sc.constants_inputs().lambda, 3.5);
    }
}
