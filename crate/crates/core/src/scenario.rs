//! Scenario files: one flat JSON object with a `mode`, shared `params` and
//! mode-specific blocks. Loading reports every problem found, each with the
//! path of the offending field.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{Map, Value};

use crate::error::{Error, FieldError, Result, ValidationErrors};
use crate::harness::{AvSpec, ExperimentSetup, Perturbation};
use crate::io::read_cloud_csv;
use crate::kernels::{ControlSchedule, ModelParams};
use crate::meanfield::{check_scheme, AvState, MeanFieldState, SchemeParams};
use crate::measures::{discretize, DensitySpec, ParticleCloud};
use crate::micro::{MicroState, VehicleClass, VehicleState};
use crate::transport::GroundMetric;

pub const SCHEMA_VERSION: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Micro,
    MeanField,
    Converge,
    Stability,
    SchemeOrder,
    Dist,
}

impl Mode {
    pub const ALL: [Mode; 6] = [
        Mode::Micro,
        Mode::MeanField,
        Mode::Converge,
        Mode::Stability,
        Mode::SchemeOrder,
        Mode::Dist,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Micro => "micro",
            Mode::MeanField => "meanfield",
            Mode::Converge => "converge",
            Mode::Stability => "stability",
            Mode::SchemeOrder => "scheme-order",
            Mode::Dist => "dist",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    /// `(required, optional)` top-level keys besides `version` and `mode`.
    fn keys(self) -> (&'static [&'static str], &'static [&'static str]) {
        match self {
            Mode::Micro => (&["params", "vehicles", "dt_max", "sample_dt"], &["seed"]),
            Mode::MeanField => (&["params", "scheme", "lanes", "sample_dt"], &["seed", "avs"]),
            Mode::Converge => (
                &["params", "scheme", "lanes", "dt_max", "n_ref", "Ns", "times"],
                &["seed", "avs"],
            ),
            Mode::Stability => (
                &["params", "scheme", "lanes", "n_ref", "deltas", "times"],
                &["seed", "avs", "perturbation"],
            ),
            Mode::SchemeOrder => (&["params", "scheme", "lanes", "n_ref", "k_list"], &["seed", "avs"]),
            Mode::Dist => (
                &["cloud_a", "cloud_b"],
                &["seed", "a", "b", "velocity_weight", "write_plan"],
            ),
        }
    }
}

#[derive(Debug, Clone)]
pub enum ScenarioKind {
    Micro {
        state: MicroState,
        dt_max: f64,
        sample_dt: f64,
    },
    MeanField {
        state: MeanFieldState,
        scheme: SchemeParams,
        sample_dt: f64,
    },
    Converge {
        setup: ExperimentSetup,
        ns: Vec<usize>,
        times: Vec<f64>,
    },
    Stability {
        setup: ExperimentSetup,
        deltas: Vec<f64>,
        times: Vec<f64>,
        perturbation: Perturbation,
    },
    SchemeOrder {
        setup: ExperimentSetup,
        k_list: Vec<u32>,
    },
    Dist {
        cloud_a: ParticleCloud,
        cloud_b: ParticleCloud,
        a: f64,
        b: f64,
        metric: GroundMetric,
        write_plan: Option<PathBuf>,
    },
}

#[derive(Debug, Clone)]
pub struct ScenarioFile {
    pub version: u64,
    pub seed: u64,
    pub kind: ScenarioKind,
}

impl ScenarioFile {
    pub fn mode(&self) -> Mode {
        match self.kind {
            ScenarioKind::Micro { .. } => Mode::Micro,
            ScenarioKind::MeanField { .. } => Mode::MeanField,
            ScenarioKind::Converge { .. } => Mode::Converge,
            ScenarioKind::Stability { .. } => Mode::Stability,
            ScenarioKind::SchemeOrder { .. } => Mode::SchemeOrder,
            ScenarioKind::Dist { .. } => Mode::Dist,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct VehicleJson {
    id: u64,
    class: VehicleClass,
    lane: usize,
    x: f64,
    v: f64,
    timer0: f64,
    #[serde(default)]
    control: Option<ControlSchedule>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AvJson {
    id: u64,
    lane: usize,
    y: f64,
    w: f64,
    timer0: f64,
    control: ControlSchedule,
}

impl From<AvJson> for AvSpec {
    fn from(a: AvJson) -> Self {
        AvSpec {
            id: a.id,
            lane: a.lane,
            y: a.y,
            w: a.w,
            timer0: a.timer0,
            control: a.control,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LaneJson {
    #[serde(default)]
    density: Option<DensitySpec>,
    #[serde(default)]
    atoms: Option<usize>,
    #[serde(default)]
    cloud_csv: Option<PathBuf>,
}

/// Read and fully validate a scenario file.
pub fn load_scenario(path: &Path) -> Result<ScenarioFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_scenario(&text, base)
}

fn take<T: DeserializeOwned>(obj: &Map<String, Value>, key: &str, errs: &mut ValidationErrors) -> Option<T> {
    let value = obj.get(key)?;
    match serde_path_to_error::deserialize::<_, T>(value.clone()) {
        Ok(t) => Some(t),
        Err(e) => {
            let inner = e.path().to_string();
            let path = match inner.as_str() {
                "." | "" => key.to_string(),
                p if p.starts_with('[') => format!("{key}{p}"),
                p => format!("{key}.{p}"),
            };
            errs.push(path, e.into_inner().to_string());
            None
        }
    }
}

fn check_keys(
    obj: &Map<String, Value>,
    prefix: &str,
    required: &[&str],
    optional: &[&str],
    errs: &mut ValidationErrors,
) {
    for key in obj.keys() {
        if !required.contains(&key.as_str()) && !optional.contains(&key.as_str()) {
            errs.push(format!("{prefix}{key}"), "unknown field");
        }
    }
    for key in required {
        if !obj.contains_key(*key) {
            errs.push(format!("{prefix}{key}"), "missing field");
        }
    }
}

/// Parse and validate scenario text; relative paths resolve against `base`.
pub fn parse_scenario(text: &str, base: &Path) -> Result<ScenarioFile> {
    let root: Value = serde_json::from_str(text).map_err(|e| Error::Parse {
        path: format!("line {} column {}", e.line(), e.column()),
        reason: e.to_string(),
    })?;
    let obj = root.as_object().ok_or_else(|| Error::Parse {
        path: "$".into(),
        reason: "scenario must be a JSON object".into(),
    })?;
    let mut errs = ValidationErrors::default();

    match obj.get("version").and_then(Value::as_u64) {
        Some(SCHEMA_VERSION) => {}
        Some(v) => errs.push("version", format!("unsupported version {v}, expected {SCHEMA_VERSION}")),
        None => errs.push("version", "missing or not an unsigned integer"),
    }
    let mode = match obj.get("mode").and_then(Value::as_str) {
        Some(s) => match Mode::parse(s) {
            Some(m) => m,
            None => {
                errs.push("mode", format!("unknown mode '{s}'"));
                return Err(Error::Validation(errs));
            }
        },
        None => {
            errs.push("mode", "missing or not a string");
            return Err(Error::Validation(errs));
        }
    };
    let (required, optional) = mode.keys();
    let mut allowed: Vec<&str> = vec!["version", "mode"];
    allowed.extend_from_slice(optional);
    check_keys(obj, "", required, &allowed, &mut errs);

    let seed: u64 = take(obj, "seed", &mut errs).unwrap_or(0);

    let params: Option<ModelParams> = match obj.get("params") {
        Some(Value::Object(p)) => {
            let req: Vec<&str> = ModelParams::FIELDS
                .iter()
                .copied()
                .filter(|f| !ModelParams::OPTIONAL_FIELDS.contains(f))
                .collect();
            let before = errs.0.len();
            check_keys(p, "params.", &req, ModelParams::OPTIONAL_FIELDS, &mut errs);
            if errs.0.len() == before {
                take::<ModelParams>(obj, "params", &mut errs).and_then(|p| {
                    let e = p.check("params.");
                    let ok = e.is_empty();
                    errs.extend(e);
                    ok.then_some(p)
                })
            } else {
                None
            }
        }
        Some(_) => {
            errs.push("params", "must be an object");
            None
        }
        None => None,
    };

    let kind = match mode {
        Mode::Micro => micro_kind(obj, params, &mut errs),
        Mode::MeanField => meanfield_kind(obj, params, seed, base, &mut errs),
        Mode::Converge | Mode::Stability | Mode::SchemeOrder => experiment_kind(mode, obj, params, seed, &mut errs),
        Mode::Dist => dist_kind(obj, base, &mut errs),
    };
    match kind {
        Some(kind) if errs.is_empty() => Ok(ScenarioFile {
            version: SCHEMA_VERSION,
            seed,
            kind,
        }),
        _ => {
            if errs.is_empty() {
                errs.push("$", "invalid scenario");
            }
            Err(Error::Validation(errs))
        }
    }
}

fn positive(name: &str, value: Option<f64>, errs: &mut ValidationErrors) -> Option<f64> {
    let v = value?;
    if v.is_finite() && v > 0.0 {
        Some(v)
    } else {
        errs.push(name, format!("must be finite and > 0, got {v}"));
        None
    }
}

fn absorb<T>(result: Result<T>, errs: &mut ValidationErrors) -> Option<T> {
    match result {
        Ok(t) => Some(t),
        Err(Error::Validation(v)) => {
            errs.extend(v);
            None
        }
        Err(e) => {
            errs.0.push(FieldError::new("$", e.to_string()));
            None
        }
    }
}

fn micro_kind(
    obj: &Map<String, Value>,
    params: Option<ModelParams>,
    errs: &mut ValidationErrors,
) -> Option<ScenarioKind> {
    let vehicles: Option<Vec<VehicleJson>> = take(obj, "vehicles", errs);
    let dt_max = positive("dt_max", take(obj, "dt_max", errs), errs);
    let sample_dt = positive("sample_dt", take(obj, "sample_dt", errs), errs);
    let params = params?;
    let vehicles: Vec<VehicleState> = vehicles?
        .into_iter()
        .map(|v| VehicleState {
            id: v.id,
            class: v.class,
            lane: v.lane,
            x: v.x,
            v: v.v,
            timer: v.timer0,
            control: v.control,
        })
        .collect();
    let state = absorb(MicroState::new(params, 0.0, vehicles), errs)?;
    Some(ScenarioKind::Micro {
        state,
        dt_max: dt_max?,
        sample_dt: sample_dt?,
    })
}

fn avs_of(obj: &Map<String, Value>, errs: &mut ValidationErrors) -> Option<Vec<AvSpec>> {
    if obj.contains_key("avs") {
        take::<Vec<AvJson>>(obj, "avs", errs).map(|v| v.into_iter().map(AvSpec::from).collect())
    } else {
        Some(Vec::new())
    }
}

fn lanes_of(obj: &Map<String, Value>, params: &ModelParams, errs: &mut ValidationErrors) -> Option<Vec<LaneJson>> {
    let lanes: Vec<LaneJson> = take(obj, "lanes", errs)?;
    if lanes.len() != params.m_lanes() {
        errs.push(
            "lanes",
            format!(
                "expected {} lanes (params.m_lanes), got {}",
                params.m_lanes(),
                lanes.len()
            ),
        );
        return None;
    }
    Some(lanes)
}

fn meanfield_kind(
    obj: &Map<String, Value>,
    params: Option<ModelParams>,
    seed: u64,
    base: &Path,
    errs: &mut ValidationErrors,
) -> Option<ScenarioKind> {
    let scheme: Option<SchemeParams> = take(obj, "scheme", errs);
    let sample_dt = positive("sample_dt", take(obj, "sample_dt", errs), errs);
    let avs = avs_of(obj, errs);
    let params = params?;
    let lanes = lanes_of(obj, &params, errs)?;
    let mut clouds = Vec::new();
    for (j, lane) in lanes.into_iter().enumerate() {
        let p = format!("lanes[{j}].");
        match lane {
            LaneJson {
                density: Some(d),
                atoms: Some(n),
                cloud_csv: None,
            } => {
                let e = d.check(&format!("{p}density."));
                if !e.is_empty() {
                    errs.extend(e);
                } else if n == 0 {
                    errs.push(format!("{p}atoms"), "must be >= 1");
                } else if let Some(c) = absorb(discretize(&d, n, seed), errs) {
                    clouds.push(c);
                }
            }
            LaneJson {
                density: None,
                atoms: None,
                cloud_csv: Some(path),
            } => {
                let full = base.join(&path);
                if !full.is_file() {
                    errs.push(
                        format!("{p}cloud_csv"),
                        format!("file {} does not exist", full.display()),
                    );
                } else {
                    match read_cloud_csv(&full) {
                        Ok(c) => clouds.push(c),
                        Err(e) => errs.push(format!("{p}cloud_csv"), e.to_string()),
                    }
                }
            }
            _ => errs.push(p.trim_end_matches('.'), "give either density and atoms, or cloud_csv"),
        }
    }
    let scheme = scheme?;
    if let Err(e) = check_scheme(&params, &scheme) {
        match e {
            Error::Validation(v) => errs.extend(v),
            other => errs.push("scheme.k_dyadic", other.to_string()),
        }
    }
    let avs: Vec<AvState> = avs?
        .into_iter()
        .map(|a| AvState {
            id: a.id,
            lane: a.lane,
            y: a.y,
            w: a.w,
            timer: a.timer0,
            control: a.control,
        })
        .collect();
    if clouds.len() != params.m_lanes() {
        return None;
    }
    let state = absorb(MeanFieldState::new(params, 0.0, clouds, avs), errs)?;
    Some(ScenarioKind::MeanField {
        state,
        scheme,
        sample_dt: sample_dt?,
    })
}

fn experiment_kind(
    mode: Mode,
    obj: &Map<String, Value>,
    params: Option<ModelParams>,
    seed: u64,
    errs: &mut ValidationErrors,
) -> Option<ScenarioKind> {
    let scheme: Option<SchemeParams> = take(obj, "scheme", errs);
    let n_ref: Option<usize> = take(obj, "n_ref", errs);
    let avs = avs_of(obj, errs);
    let dt_max = if mode == Mode::Converge {
        positive("dt_max", take(obj, "dt_max", errs), errs)
    } else {
        Some(1.0)
    };
    let params = params?;
    let lanes = lanes_of(obj, &params, errs)?;
    let mut densities = Vec::new();
    for (j, lane) in lanes.into_iter().enumerate() {
        let p = format!("lanes[{j}].");
        match lane {
            LaneJson {
                density: Some(d),
                atoms: None,
                cloud_csv: None,
            } => {
                errs.extend(d.check(&format!("{p}density.")));
                if mode == Mode::Converge && d.mass() != 1.0 {
                    errs.push(
                        format!("{p}density.mass"),
                        "must be 1: microscopic lanes carry unit mass",
                    );
                }
                densities.push(d);
            }
            _ => errs.push(
                p.trim_end_matches('.'),
                "experiments take a density only (atoms come from n_ref and Ns)",
            ),
        }
    }
    if densities.len() != params.m_lanes() {
        return None;
    }
    let scheme = scheme?;
    let setup = ExperimentSetup {
        params: params.clone(),
        densities,
        avs: avs?,
        seed,
        n_ref: n_ref?,
        scheme,
        dt_max: dt_max?,
    };
    let before = errs.0.len();
    errs.extend(setup.check());
    if let Err(e) = check_scheme(&params, &scheme) {
        if !matches!(e, Error::Validation(_)) {
            errs.push("scheme.k_dyadic", e.to_string());
        }
    }
    if errs.0.len() == before && setup.densities.len() == params.m_lanes() {
        // Validates the AV block (timers, lanes, controls) on a one-atom state.
        let probe = ExperimentSetup {
            n_ref: 1,
            ..setup.clone()
        };
        absorb(probe.meanfield_state(0.0), errs);
    }
    let increasing = |v: &[f64]| v.windows(2).all(|w| w[0] < w[1]);
    let times = |errs: &mut ValidationErrors| -> Option<Vec<f64>> {
        let t: Vec<f64> = take(obj, "times", errs)?;
        if t.is_empty() || !increasing(&t) || t[0] < 0.0 || t[t.len() - 1] > params.horizon_t {
            errs.push(
                "times",
                format!(
                    "must be nonempty, strictly increasing, within [0, {}]",
                    params.horizon_t
                ),
            );
            return None;
        }
        Some(t)
    };
    let kind = match mode {
        Mode::Converge => {
            let ns: Option<Vec<usize>> = take(obj, "Ns", errs);
            let times = times(errs);
            let ns = ns?;
            if ns.len() < 2 || ns[0] == 0 || ns.windows(2).any(|w| w[0] >= w[1]) {
                errs.push("Ns", "need at least two strictly increasing positive counts");
                return None;
            }
            ScenarioKind::Converge {
                setup,
                ns,
                times: times?,
            }
        }
        Mode::Stability => {
            let deltas: Option<Vec<f64>> = take(obj, "deltas", errs);
            let times = times(errs);
            let perturbation = if obj.contains_key("perturbation") {
                take(obj, "perturbation", errs)?
            } else {
                Perturbation::default()
            };
            let deltas = deltas?;
            if deltas.is_empty() || deltas.iter().any(|d| !(*d > 0.0)) || deltas.windows(2).any(|w| w[0] <= w[1]) {
                errs.push("deltas", "must be positive and strictly decreasing");
                return None;
            }
            ScenarioKind::Stability {
                setup,
                deltas,
                times: times?,
                perturbation,
            }
        }
        _ => {
            let k_list: Vec<u32> = take(obj, "k_list", errs)?;
            if k_list.len() < 2
                || k_list.windows(2).any(|w| w[0] > w[1])
                || k_list.iter().any(|&k| !(1..=30).contains(&k))
            {
                errs.push("k_list", "need at least two nondecreasing entries in 1..=30");
                return None;
            }
            for &k in &k_list {
                let s = SchemeParams { k_dyadic: k, ..scheme };
                if let Err(e) = check_scheme(&params, &s) {
                    errs.push("k_list", e.to_string());
                }
            }
            ScenarioKind::SchemeOrder { setup, k_list }
        }
    };
    Some(kind)
}

fn dist_kind(obj: &Map<String, Value>, base: &Path, errs: &mut ValidationErrors) -> Option<ScenarioKind> {
    let a = positive("a", Some(take(obj, "a", errs).unwrap_or(1.0)), errs);
    let b = positive("b", Some(take(obj, "b", errs).unwrap_or(1.0)), errs);
    let vw: f64 = take(obj, "velocity_weight", errs).unwrap_or(1.0);
    if !(vw.is_finite() && vw >= 0.0) {
        errs.push("velocity_weight", "must be finite and >= 0");
    }
    let write_plan: Option<PathBuf> = take(obj, "write_plan", errs);
    let mut load = |key: &str| -> Option<ParticleCloud> {
        let rel: PathBuf = take(obj, key, errs)?;
        let full = base.join(rel);
        if !full.is_file() {
            errs.push(key, format!("file {} does not exist", full.display()));
            return None;
        }
        match read_cloud_csv(&full) {
            Ok(c) => Some(c),
            Err(e) => {
                errs.push(key, e.to_string());
                None
            }
        }
    };
    let cloud_a = load("cloud_a");
    let cloud_b = load("cloud_b");
    Some(ScenarioKind::Dist {
        cloud_a: cloud_a?,
        cloud_b: cloud_b?,
        a: a?,
        b: b?,
        metric: GroundMetric { velocity_weight: vw },
        write_plan,
    })
}

/// Keys accepted anywhere in a scenario, for documentation.
pub fn all_keys() -> BTreeSet<&'static str> {
    let mut keys: BTreeSet<&str> = ["version", "mode"].into_iter().collect();
    for m in Mode::ALL {
        let (r, o) = m.keys();
        keys.extend(r.iter().copied());
        keys.extend(o.iter().copied());
    }
    keys
}

#[cfg(test)]
mod tests {
    use super::*;

    const PARAMS: &str = r#"{"alpha": 2.0, "beta": 0.5, "eps0": 2.0, "delta_lc": 0.1, "v_max": 2.0,
        "d_mid": 1.0, "p_max": 1.0, "a_ref": 0.2, "u_max": 0.5, "n_tau": 4, "horizon_T": 2.0, "m_lanes": 2}"#;

    fn micro(vehicles: &str, params: &str) -> String {
        format!(
            r#"{{"version": 1, "mode": "micro", "seed": 1, "params": {params}, "dt_max": 0.01,
                "sample_dt": 0.5, "vehicles": {vehicles}}}"#
        )
    }

    fn errors(text: &str) -> Vec<String> {
        match parse_scenario(text, Path::new(".")) {
            Err(Error::Validation(v)) => v.0.iter().map(|e| format!("{}: {}", e.path, e.reason)).collect(),
            other => panic!("expected validation errors, got {other:?}"),
        }
    }

    #[test]
    fn minimal_micro_loads() {
        let s = parse_scenario(
            &micro(
                r#"[{"id": 1, "class": "human", "lane": 1, "x": 0.0, "v": 1.0, "timer0": 0.1}]"#,
                PARAMS,
            ),
            Path::new("."),
        )
        .unwrap();
        assert_eq!(s.mode(), Mode::Micro);
        assert_eq!(s.seed, 1);
    }

    #[test]
    fn equal_timers_name_both_ids() {
        let e = errors(&micro(
            r#"[{"id": 4, "class": "human", "lane": 1, "x": 0.0, "v": 1.0, "timer0": 0.1},
                {"id": 8, "class": "human", "lane": 2, "x": 1.0, "v": 1.0, "timer0": 0.1}]"#,
            PARAMS,
        ));
        assert!(e.iter().any(|m| m.contains("vehicles 4 and 8")), "{e:?}");
    }

    #[test]
    fn negative_eps0_and_other_errors_all_reported() {
        let params = PARAMS
            .replace("\"eps0\": 2.0", "\"eps0\": -1.0")
            .replace("\"beta\": 0.5", "\"beta\": 0.0");
        let mut text = micro("[]", &params);
        text = text.replace("\"seed\": 1", "\"seed\": 1, \"bogus\": 3");
        let e = errors(&text);
        assert!(e.iter().any(|m| m.starts_with("params.eps0")), "{e:?}");
        assert!(e.iter().any(|m| m.starts_with("params.beta")), "{e:?}");
        assert!(e.iter().any(|m| m.starts_with("bogus: unknown")), "{e:?}");
    }

    #[test]
    fn unknown_and_missing_param_fields() {
        let params = PARAMS.replace("\"alpha\": 2.0,", "\"alhpa\": 2.0,");
        let e = errors(&micro("[]", &params));
        assert!(e.contains(&"params.alhpa: unknown field".to_string()), "{e:?}");
        assert!(e.contains(&"params.alpha: missing field".to_string()), "{e:?}");
    }

    #[test]
    fn typed_errors_carry_paths() {
        let e = errors(&micro(
            r#"[{"id": 1, "class": "human", "lane": 1, "x": "far", "v": 1.0, "timer0": 0.1}]"#,
            PARAMS,
        ));
        assert!(e.iter().any(|m| m.starts_with("vehicles[0].x")), "{e:?}");
    }

    #[test]
    fn version_and_mode_checked() {
        let text = micro("[]", PARAMS).replace("\"version\": 1", "\"version\": 2");
        assert!(errors(&text).iter().any(|m| m.starts_with("version")));
        let text = micro("[]", PARAMS).replace("\"micro\"", "\"macro\"");
        assert!(errors(&text).iter().any(|m| m.starts_with("mode")));
        assert!(matches!(parse_scenario("{", Path::new(".")), Err(Error::Parse { .. })));
    }

    #[test]
    fn meanfield_density_lanes() {
        let text = format!(
            r#"{{"version": 1, "mode": "meanfield", "params": {PARAMS}, "sample_dt": 0.5,
                "scheme": {{"k_dyadic": 5, "dt_max": 0.01}},
                "lanes": [{{"density": {{"kind": "uniform-box", "x_min": 0, "x_max": 4, "v_min": 0.5, "v_max": 1.0, "mass": 1}}, "atoms": 10}},
                          {{"cloud_csv": "missing.csv"}}]}}"#
        );
        let e = errors(&text);
        assert!(e.iter().any(|m| m.starts_with("lanes[1].cloud_csv")), "{e:?}");
    }

    #[test]
    fn mode_irrelevant_fields_rejected() {
        let text = micro("[]", PARAMS).replace("\"seed\": 1", "\"seed\": 1, \"k_list\": [1, 2]");
        assert!(errors(&text).iter().any(|m| m.starts_with("k_list: unknown")));
    }
}
