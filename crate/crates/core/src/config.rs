//! Experiment configuration: TOML (or JSON) files, named presets, validation.
//!
//! A config may name a `preset`; every top-level key present in the file then
//! replaces the preset's value for that key wholesale (sections are not merged
//! field by field).

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{FlowConfig, QuadraticFarField};
use crate::grid::{BoxDomain, Point};
use crate::linalg::SymMat;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("{0}")]
    Parse(String),
    #[error("line {line}: {key}: {message}")]
    Invalid { line: usize, key: String, message: String },
    #[error("{key}: {message}")]
    InvalidUnlocated { key: String, message: String },
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
}

/// (name, TOML text) of every bundled preset.
pub const PRESETS: &[(&str, &str)] = &[
    ("quadratic-exact", include_str!("../presets/quadratic-exact.toml")),
    ("condition-b", include_str!("../presets/condition-b.toml")),
    ("heat-oracle", include_str!("../presets/heat-oracle.toml")),
    ("expander-radial", include_str!("../presets/expander-radial.toml")),
    ("legendre-dual", include_str!("../presets/legendre-dual.toml")),
    ("mcf-bump", include_str!("../presets/mcf-bump.toml")),
    ("decay-1d", include_str!("../presets/decay-1d.toml")),
    ("blowdown-1d", include_str!("../presets/blowdown-1d.toml")),
    ("plane-1d", include_str!("../presets/plane-1d.toml")),
];

pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|p| p.0).collect()
}

pub fn preset_text(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|p| p.0 == name).map(|p| p.1)
}

/// Name of a bundled preset; unknown names fail with the list of available ones.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PresetName(String);

impl PresetName {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for PresetName {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        if preset_text(&s).is_some() {
            Ok(Self(s))
        } else {
            Err(format!("unknown preset '{s}'; available presets: {}", preset_names().join(", ")))
        }
    }
}

impl From<PresetName> for String {
    fn from(p: PresetName) -> String {
        p.0
    }
}

impl fmt::Display for PresetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    Flow,
    Heat,
    Expander,
    Legendre,
    Mcf,
    Blowdown,
    Decay,
    Plane,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    #[serde(deserialize_with = "de_dim")]
    n: usize,
    #[serde(deserialize_with = "de_half_width")]
    half_width: f64,
    #[serde(deserialize_with = "de_points")]
    points: usize,
    #[serde(default)]
    interior_margin: usize,
}

// Per-field checks so parse errors point at the offending value rather than the table end.
fn de_dim<'de, D: serde::Deserializer<'de>>(d: D) -> Result<usize, D::Error> {
    let n = usize::deserialize(d)?;
    if !(1..=3).contains(&n) {
        return Err(serde::de::Error::custom(format!("dimension must be 1, 2 or 3 (got {n})")));
    }
    Ok(n)
}

fn de_half_width<'de, D: serde::Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    let l = f64::deserialize(d)?;
    if !(l.is_finite() && l > 0.0) {
        return Err(serde::de::Error::custom(format!("half width must be positive (got {l})")));
    }
    Ok(l)
}

fn de_points<'de, D: serde::Deserializer<'de>>(d: D) -> Result<usize, D::Error> {
    let m = usize::deserialize(d)?;
    if m < 5 {
        return Err(serde::de::Error::custom(format!("points per axis must be at least 5 (got {m})")));
    }
    Ok(m)
}

/// Validated grid description (n ∈ 1..=3, m ≥ 5, L > 0).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGrid", into = "RawGrid")]
pub struct GridSpec {
    domain: BoxDomain,
}

impl GridSpec {
    pub fn domain(&self) -> BoxDomain {
        self.domain
    }
}

impl TryFrom<RawGrid> for GridSpec {
    type Error = String;

    fn try_from(r: RawGrid) -> Result<Self, String> {
        let d = BoxDomain::new(r.n, r.half_width, r.points).map_err(|e| e.to_string())?;
        Ok(Self {
            domain: d.with_interior_margin(r.interior_margin),
        })
    }
}

impl From<GridSpec> for RawGrid {
    fn from(g: GridSpec) -> Self {
        Self {
            n: g.domain.dim(),
            half_width: g.domain.half_width(),
            points: g.domain.points_per_axis(),
            interior_margin: g.domain.interior_margin(),
        }
    }
}

fn default_width() -> f64 {
    1.0
}

/// Initial data presets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialData {
    /// ½xᵀAx + b·x + c.
    Quadratic {
        a: SymMat,
        #[serde(default)]
        b: Vec<f64>,
        #[serde(default)]
        c: f64,
    },
    /// ½xᵀAx + b·x + c + amplitude·exp(−|x − center|²/width²).
    QuadraticPlusBump {
        a: SymMat,
        #[serde(default)]
        b: Vec<f64>,
        #[serde(default)]
        c: f64,
        amplitude: f64,
        #[serde(default = "default_width")]
        width: f64,
        #[serde(default)]
        center: Vec<f64>,
    },
    /// b·x + c + amplitude·Σᵢ(√π/2)·width·erf(xᵢ/width), so ∂ᵢu = bᵢ + amplitude·exp(−xᵢ²/width²).
    LinearPlusBump {
        b: Vec<f64>,
        #[serde(default)]
        c: f64,
        amplitude: f64,
        #[serde(default = "default_width")]
        width: f64,
    },
    /// Self-expander from profile shooting with u(0) = a (and u'(0) = slope, n = 1 only).
    Expander {
        a: f64,
        #[serde(default)]
        slope: f64,
    },
}

fn vec3(v: &[f64]) -> Point {
    let mut p = [0.0; 3];
    for (i, x) in v.iter().take(3).enumerate() {
        p[i] = *x;
    }
    p
}

impl InitialData {
    /// Evaluates the closed-form initial data (not available for expanders).
    pub fn value(&self, x: &Point, n: usize) -> Option<f64> {
        let dot = |b: &[f64]| (0..n).map(|i| b.get(i).copied().unwrap_or(0.0) * x[i]).sum::<f64>();
        match self {
            InitialData::Quadratic { a, b, c } => Some(0.5 * a.quad_form(x) + dot(b) + c),
            InitialData::QuadraticPlusBump {
                a,
                b,
                c,
                amplitude,
                width,
                center,
            } => {
                let ctr = vec3(center);
                let r2: f64 = (0..n).map(|i| (x[i] - ctr[i]).powi(2)).sum();
                Some(0.5 * a.quad_form(x) + dot(b) + c + amplitude * (-r2 / (width * width)).exp())
            }
            InitialData::LinearPlusBump { b, c, amplitude, width } => {
                let s: f64 = (0..n)
                    .map(|i| 0.5 * std::f64::consts::PI.sqrt() * width * statrs::function::erf::erf(x[i] / width))
                    .sum();
                Some(dot(b) + c + amplitude * s)
            }
            InitialData::Expander { .. } => None,
        }
    }

    /// Far-field quadratic of the quadratic families.
    pub fn far_field(&self) -> Option<QuadraticFarField> {
        match self {
            InitialData::Quadratic { a, b, c } | InitialData::QuadraticPlusBump { a, b, c, .. } => {
                QuadraticFarField::new(*a, vec3(b), *c).ok()
            }
            _ => None,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            InitialData::Quadratic { .. } => "quadratic",
            InitialData::QuadraticPlusBump { .. } => "quadratic_plus_bump",
            InitialData::LinearPlusBump { .. } => "linear_plus_bump",
            InitialData::Expander { .. } => "expander",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryKind {
    /// Quadratic far field of the initial data evolved in closed form.
    #[default]
    FarField,
    Frozen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSpec {
    /// Half width of the centred analysis window (blow-down, plane).
    pub window: f64,
    pub window_points: usize,
    /// First snapshot time used by the blow-down comparison.
    pub t_min: f64,
    /// Derivative orders for decay fits.
    pub orders: Vec<usize>,
    pub eps0: f64,
    /// Final-value tolerance for blow-down and plane convergence.
    pub tolerance: f64,
    pub seeds_per_axis: usize,
    pub seed_half_width: f64,
    pub particle_substeps: usize,
    /// Slack constant C in the eigenvalue-swap test (C·h).
    pub swap_slack: f64,
    pub expander_r_max: Option<f64>,
}

impl Default for AnalysisSpec {
    fn default() -> Self {
        Self {
            window: 1.0,
            window_points: 21,
            t_min: 1.0,
            orders: vec![3, 4],
            eps0: crate::analysis::DEFAULT_EPS0,
            tolerance: 0.02,
            seeds_per_axis: 3,
            seed_half_width: 0.5,
            particle_substeps: 4,
            swap_slack: 1.0,
            expander_r_max: None,
        }
    }
}

/// Acceptance bound on one summary metric, used by `--check`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Bound {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max: Option<f64>,
}

impl Bound {
    pub fn holds(&self, v: f64) -> bool {
        self.min.is_none_or(|m| v >= m) && self.max.is_none_or(|m| v <= m)
    }
}

fn default_output() -> PathBuf {
    PathBuf::from("runs/experiment")
}

/// Fully resolved experiment description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<PresetName>,
    pub pipeline: Pipeline,
    #[serde(default)]
    pub seed: u64,
    /// Amplitude of seeded uniform noise added to interior initial values.
    #[serde(default)]
    pub noise: f64,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    /// Also write CSV copies of every snapshot.
    #[serde(default)]
    pub snapshot_csv: bool,
    pub grid: GridSpec,
    pub initial: InitialData,
    #[serde(default)]
    pub boundary: BoundaryKind,
    #[serde(default)]
    pub flow: FlowConfig,
    #[serde(default)]
    pub analysis: AnalysisSpec,
    #[serde(default)]
    pub check: BTreeMap<String, Bound>,
}

/// Same shape with every top-level key optional: used to validate the user's file
/// on its own (so errors point into it) before merging with a preset.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
#[allow(dead_code)]
struct PartialConfig {
    preset: Option<PresetName>,
    pipeline: Option<Pipeline>,
    seed: Option<u64>,
    noise: Option<f64>,
    output: Option<PathBuf>,
    snapshot_csv: Option<bool>,
    grid: Option<GridSpec>,
    initial: Option<InitialData>,
    boundary: Option<BoundaryKind>,
    flow: Option<FlowConfig>,
    analysis: Option<AnalysisSpec>,
    check: Option<BTreeMap<String, Bound>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Toml,
    Json,
}

impl Format {
    pub fn detect(text: &str) -> Self {
        if text.trim_start().starts_with('{') {
            Format::Json
        } else {
            Format::Toml
        }
    }
}

fn parse_value(text: &str, format: Format) -> Result<serde_json::Value, ConfigError> {
    match format {
        Format::Json => {
            serde_json::from_str::<PartialConfig>(text).map_err(|e| ConfigError::Parse(format!("JSON config: {e}")))?;
            serde_json::from_str(text).map_err(|e| ConfigError::Parse(format!("JSON config: {e}")))
        }
        Format::Toml => {
            toml::from_str::<PartialConfig>(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
            let table: toml::Table = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
            serde_json::to_value(table).map_err(|e| ConfigError::Parse(e.to_string()))
        }
    }
}

/// 1-based line of `key` inside `[section]` (TOML) or after `"section"` (JSON).
pub fn locate_key(text: &str, dotted: &str) -> Option<usize> {
    let (section, key) = match dotted.split_once('.') {
        Some((s, k)) => (Some(s), k),
        None => (None, dotted),
    };
    let mut current: Option<String> = None;
    let mut seen_section = section.is_none();
    for (i, line) in text.lines().enumerate() {
        let l = line.trim();
        if l.starts_with('[') {
            current = Some(l.trim_matches(|c| c == '[' || c == ']').trim().to_string());
            continue;
        }
        if let Some(s) = section {
            if l.contains(&format!("\"{s}\"")) {
                seen_section = true;
            }
        }
        let in_section = match (section, &current) {
            (Some(s), Some(c)) => c == s,
            (None, None) => true,
            _ => false,
        };
        let toml_key = l.starts_with(key) && l[key.len()..].trim_start().starts_with('=');
        let json_key = seen_section && l.starts_with(&format!("\"{key}\""));
        if (in_section && toml_key) || json_key {
            return Some(i + 1);
        }
        if let Some(s) = section {
            // inline table form: section = { key = … }
            if current.is_none() && l.starts_with(s) && l.contains(&format!("{key} =")) {
                return Some(i + 1);
            }
        }
    }
    None
}

impl ExperimentConfig {
    /// Parses a config text (TOML or JSON), applies its preset and validates.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let format = Format::detect(text);
        let user = parse_value(text, format)?;
        let merged = match user.get("preset").and_then(|v| v.as_str()) {
            Some(name) => {
                let base_text = preset_text(name).expect("validated preset name");
                let mut base = parse_value(base_text, Format::Toml)?;
                let (Some(b), Some(u)) = (base.as_object_mut(), user.as_object()) else {
                    return Err(ConfigError::Parse("config must be a table".into()));
                };
                for (k, v) in u {
                    b.insert(k.clone(), v.clone());
                }
                base
            }
            None => user,
        };
        let cfg: ExperimentConfig = serde_json::from_value(merged).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate().map_err(|(key, message)| match locate_key(text, &key) {
            Some(line) => ConfigError::Invalid { line, key, message },
            None => ConfigError::InvalidUnlocated { key, message },
        })?;
        Ok(cfg)
    }

    pub fn from_preset(name: &str) -> Result<Self, ConfigError> {
        let text = preset_text(name).ok_or_else(|| ConfigError::InvalidUnlocated {
            key: "preset".into(),
            message: format!("unknown preset '{name}'; available presets: {}", preset_names().join(", ")),
        })?;
        let mut cfg = Self::parse(text)?;
        cfg.preset = Some(PresetName(name.into()));
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text).map_err(|e| match e {
            ConfigError::Parse(m) => ConfigError::Parse(format!("{}: {m}", path.display())),
            ConfigError::Invalid { line, key, message } => ConfigError::Invalid {
                line,
                key,
                message: format!("{message} (in {})", path.display()),
            },
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes to JSON")
    }

    pub fn domain(&self) -> BoxDomain {
        self.grid.domain()
    }

    /// Cross-field checks; returns (dotted key, message).
    pub fn validate(&self) -> Result<(), (String, String)> {
        let n = self.grid.domain().dim();
        let vec_ok = |v: &Vec<f64>| v.is_empty() || v.len() == n;
        match &self.initial {
            InitialData::Quadratic { a, b, .. } | InitialData::QuadraticPlusBump { a, b, .. } => {
                if a.dim() != n {
                    return Err(("initial.a".into(), format!("matrix is {0}×{0} but grid.n = {n}", a.dim())));
                }
                if a.eigen_bounds().0 <= 0.0 {
                    return Err(("initial.a".into(), "matrix must be positive definite".into()));
                }
                if !vec_ok(b) {
                    return Err(("initial.b".into(), format!("vector length must equal grid.n = {n}")));
                }
            }
            InitialData::LinearPlusBump { b, width, .. } => {
                if b.len() != n {
                    return Err(("initial.b".into(), format!("vector length must equal grid.n = {n}")));
                }
                if !(*width > 0.0) {
                    return Err(("initial.width".into(), "width must be positive".into()));
                }
            }
            InitialData::Expander { slope, .. } => {
                if *slope != 0.0 && n != 1 {
                    return Err(("initial.slope".into(), "a nonzero slope needs grid.n = 1".into()));
                }
            }
        }
        if let InitialData::QuadraticPlusBump { width, center, .. } = &self.initial {
            if !(*width > 0.0) {
                return Err(("initial.width".into(), "width must be positive".into()));
            }
            if !vec_ok(center) {
                return Err(("initial.center".into(), format!("vector length must equal grid.n = {n}")));
            }
        }
        if !(0.0..=1.0).contains(&self.flow.tau) {
            return Err(("flow.tau".into(), format!("τ must lie in [0, 1] (got {})", self.flow.tau)));
        }
        if !(self.flow.t_end > 0.0) {
            return Err(("flow.t_end".into(), "t_end must be positive".into()));
        }
        if let Err(e) = self.flow.snapshots.times(self.flow.t_end) {
            return Err(("flow.snapshots".into(), e.to_string()));
        }
        if self.boundary == BoundaryKind::FarField && self.initial.far_field().is_none() && self.pipeline != Pipeline::Expander {
            return Err((
                "boundary".into(),
                format!("far_field boundary needs quadratic initial data (initial.kind = {})", self.initial.kind()),
            ));
        }
        if self.pipeline == Pipeline::Expander && !matches!(self.initial, InitialData::Expander { .. }) {
            return Err(("initial.kind".into(), "the expander pipeline needs initial.kind = \"expander\"".into()));
        }
        if matches!(self.pipeline, Pipeline::Heat | Pipeline::Blowdown) && self.initial.far_field().is_none() {
            return Err((
                "initial.kind".into(),
                format!("the {:?} pipeline needs quadratic initial data", self.pipeline).to_lowercase(),
            ));
        }
        if self.seed > i64::MAX as u64 {
            return Err(("seed".into(), format!("seed must be at most {} to be representable in TOML", i64::MAX)));
        }
        if self.noise < 0.0 || !self.noise.is_finite() {
            return Err(("noise".into(), "noise amplitude must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_parses_and_round_trips() {
        for name in preset_names() {
            let cfg = ExperimentConfig::from_preset(name).unwrap_or_else(|e| panic!("{name}: {e}"));
            let back = ExperimentConfig::parse(&cfg.to_toml()).unwrap();
            assert_eq!(back, cfg, "{name} TOML round trip");
            let back = ExperimentConfig::parse(&cfg.to_json()).unwrap();
            assert_eq!(back, cfg, "{name} JSON round trip");
        }
    }

    #[test]
    fn small_grid_is_rejected_with_line() {
        let text = "preset = \"quadratic-exact\"\n\n[grid]\nn = 2\nhalf_width = 2.0\npoints = 3\n";
        let err = ExperimentConfig::parse(text).unwrap_err().to_string();
        assert!(err.contains("line 6"), "{err}");
        assert!(err.contains("5"), "{err}");
    }

    #[test]
    fn unknown_preset_lists_available() {
        let err = ExperimentConfig::parse("preset = \"nope\"\n").unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
        for name in preset_names() {
            assert!(err.contains(name), "{err}");
        }
    }

    #[test]
    fn cross_field_errors_are_located() {
        let text = "preset = \"condition-b\"\n[initial]\nkind = \"quadratic\"\na = [[1.0]]\n";
        match ExperimentConfig::parse(text).unwrap_err() {
            ConfigError::Invalid { line, key, .. } => {
                assert_eq!(line, 4);
                assert_eq!(key, "initial.a");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn json_errors_carry_line_numbers() {
        let text = "{\n  \"preset\": \"quadratic-exact\",\n  \"grid\": {\"n\": 2, \"half_width\": 2.0, \"points\": 4}\n}";
        let err = ExperimentConfig::parse(text).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn override_replaces_section() {
        let text = "preset = \"quadratic-exact\"\n[flow]\ntau = 0.5\nt_end = 0.25\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.flow.tau, 0.5);
        assert_eq!(cfg.flow.t_end, 0.25);
        assert_eq!(cfg.grid.domain().points_per_axis(), 65);
    }
}
