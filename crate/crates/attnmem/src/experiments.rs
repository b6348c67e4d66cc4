//! Parameter sweeps, figure presets and CSV output.
//!
//! A [`SweepConfig`] fixes every parameter of a cell except one axis, which runs
//! over a grid. [`run_sweep`] evaluates the theory at each grid point, adds Monte
//! Carlo estimates in the empirical modes, and returns one [`ResultRow`] per point.
//!
//! Configs are flat `key=value` text. Recognized keys:
//!
//! | key | value |
//! |-----|-------|
//! | `label` | free text without `=` |
//! | `mode` | `theory-attention`, `theory-ridge`, `empirical-attention`, `empirical-ridge`, `diagnostics` |
//! | `f` | a catalog name or `softmax` |
//! | `f.<param>` | map parameter such as `f.bound`, `f.cap`, `f.r` |
//! | `axis` | `gamma`, `snr`, `p`, `a1-mix` |
//! | `grid` | `logspace(a,b,k)`, `linspace(a,b,k)`, `rlinspace(a,b,k)` (rounded) or `v1,v2,...` |
//! | `n`, `p` | token count and dimension (`p` may be fractional for theory) |
//! | `c` | sets `p = c·n` |
//! | `gamma`, `snr` | penalty and `‖μ‖²` |
//! | `alignment` | `null`, `signal-only`, `aligned`, `aligned-unit`, `orthogonal` |
//! | `trials`, `seed` | Monte Carlo trial count and master seed |
//!
//! Blank lines and lines starting with `#` are ignored; unknown keys are rejected.
//! In `diagnostics` mode the empirical columns hold the spectral distance between
//! the kernel and its linearization instead of a memorization error.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::nonlinearity::{catalog, moments, Nonlinearity, DEFAULT_NODES};
use crate::selfconsistent::{NoiseSystemParams, SolverOptions};
use crate::simulate::{
    linearization_parts, monte_carlo, mix64, ExperimentCell, KernelModel, MonteCarloSummary, DEFAULT_SOFTMAX_CAP,
};
use crate::theory::{attention_error, ridge_error, AlignmentMode};

/// Names accepted by [`figure_preset`].
pub const FIGURE_NAMES: [&str; 11] =
    ["fig1a", "fig1b", "fig1c", "fig2a", "fig2b", "fig2c", "fig3a", "fig3b", "fig3c", "fig4", "fig5"];

/// Column names of the CSV output, in order.
pub const CSV_COLUMNS: [&str; 17] = [
    "axis_value",
    "n",
    "p",
    "c",
    "gamma",
    "snr",
    "a1",
    "nu",
    "e_theory",
    "e_ridge_theory",
    "e_emp_mean",
    "e_emp_std",
    "e_emp_stderr",
    "trials",
    "master_seed",
    "solver_iterations",
    "residual",
];

macro_rules! named_enum {
    ($(#[$meta:meta])* $name:ident, $what:literal { $($(#[$vmeta:meta])* $variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
        pub enum $name {
            $($(#[$vmeta])* $variant),+
        }

        impl $name {
            /// Every variant, in declaration order.
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            /// Identifier used in configs.
            pub fn name(&self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                Self::ALL.iter().copied().find(|v| v.name() == s).ok_or_else(|| {
                    let names: Vec<&str> = Self::ALL.iter().map(|v| v.name()).collect();
                    invalid(format!("unknown {} '{s}'; expected one of {}", $what, names.join(", ")))
                })
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
    };
}

named_enum! {
    /// What a sweep computes at each grid point.
    SweepMode, "mode" {
        /// Attention theory and ridge theory.
        TheoryAttention => "theory-attention",
        /// Ridge theory only.
        TheoryRidge => "theory-ridge",
        /// Attention theory plus Monte Carlo of the attention probe.
        EmpiricalAttention => "empirical-attention",
        /// Ridge theory plus Monte Carlo of the ridge probe.
        EmpiricalRidge => "empirical-ridge",
        /// Attention theory plus Monte Carlo of the linearization distance.
        Diagnostics => "diagnostics",
    }
}

named_enum! {
    /// The parameter that varies along a sweep.
    Axis, "axis" {
        Gamma => "gamma",
        Snr => "snr",
        P => "p",
        /// The weight `r` of the clamped Hermite mixture.
        A1Mix => "a1-mix",
    }
}

impl SweepMode {
    fn uses_attention(&self) -> bool {
        matches!(self, Self::TheoryAttention | Self::EmpiricalAttention | Self::Diagnostics)
    }

    fn is_empirical(&self) -> bool {
        matches!(self, Self::EmpiricalAttention | Self::EmpiricalRidge | Self::Diagnostics)
    }

    /// The theory-only counterpart.
    pub fn theory_only(&self) -> Self {
        if self.uses_attention() {
            Self::TheoryAttention
        } else {
            Self::TheoryRidge
        }
    }

    /// The Monte Carlo counterpart.
    pub fn empirical(&self) -> Self {
        match self {
            Self::TheoryAttention => Self::EmpiricalAttention,
            Self::TheoryRidge => Self::EmpiricalRidge,
            other => *other,
        }
    }
}

/// One curve: fixed parameters plus a grid along one axis.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub label: String,
    pub mode: SweepMode,
    /// Catalog name of the map, or `softmax`.
    pub f_name: String,
    pub f_params: Vec<(String, f64)>,
    pub axis: Axis,
    pub grid: Vec<f64>,
    pub n: usize,
    /// Dimension; fractional values are allowed for theory and rounded for simulation.
    pub p: f64,
    pub gamma: f64,
    pub snr: f64,
    pub alignment: AlignmentMode,
    pub trials: usize,
    pub master_seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            label: "sweep".into(),
            mode: SweepMode::TheoryAttention,
            f_name: "tanh".into(),
            f_params: Vec::new(),
            axis: Axis::Gamma,
            grid: logspace(1e-2, 1e3, 30),
            n: 1024,
            p: 4096.0,
            gamma: 1.0,
            snr: 0.0,
            alignment: AlignmentMode::Null,
            trials: 10,
            master_seed: 0,
        }
    }
}

/// `k` points from `a` to `b` evenly spaced in `log10`.
pub fn logspace(a: f64, b: f64, k: usize) -> Vec<f64> {
    let (la, lb) = (a.log10(), b.log10());
    spaced(k, |t| 10f64.powf(la + t * (lb - la)), a, b)
}

/// `k` evenly spaced points from `a` to `b`.
pub fn linspace(a: f64, b: f64, k: usize) -> Vec<f64> {
    spaced(k, |t| a + t * (b - a), a, b)
}

fn spaced(k: usize, at: impl Fn(f64) -> f64, a: f64, b: f64) -> Vec<f64> {
    match k {
        0 => Vec::new(),
        1 => vec![a],
        _ => (0..k)
            .map(|i| match i {
                0 => a,
                i if i == k - 1 => b,
                i => at(i as f64 / (k - 1) as f64),
            })
            .collect(),
    }
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value.trim().parse::<f64>().map_err(|_| invalid(format!("{key}: '{value}' is not a number")))
}

fn parse_count<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse::<T>().map_err(|_| invalid(format!("{key}: '{value}' is not a non-negative integer")))
}

/// Parses the `grid` value.
pub fn parse_grid(value: &str) -> Result<Vec<f64>> {
    let value = value.trim();
    for (prefix, rounded, log) in [("logspace(", false, true), ("linspace(", false, false), ("rlinspace(", true, false)]
    {
        if let Some(rest) = value.strip_prefix(prefix) {
            let inner = rest.strip_suffix(')').ok_or_else(|| invalid(format!("grid: missing ')' in '{value}'")))?;
            let parts: Vec<&str> = inner.split(',').collect();
            if parts.len() != 3 {
                return Err(invalid(format!("grid: expected three arguments in '{value}'")));
            }
            let a = parse_f64("grid", parts[0])?;
            let b = parse_f64("grid", parts[1])?;
            let k: usize = parse_count("grid", parts[2])?;
            if log && !(a > 0.0 && b > 0.0) {
                return Err(invalid("grid: logspace needs positive end points"));
            }
            let mut g = if log { logspace(a, b, k) } else { linspace(a, b, k) };
            if rounded {
                g.iter_mut().for_each(|v| *v = v.round());
            }
            return Ok(g);
        }
    }
    value.split(',').map(|v| parse_f64("grid", v)).collect()
}

/// Splits config text into `(key, value)` pairs.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        out.push(parse_assignment(line).map_err(|e| match e {
            Error::InvalidArgument(msg) => invalid(format!("line {}: {msg}", lineno + 1)),
            other => other,
        })?);
    }
    Ok(out)
}

/// Parses one `key=value` assignment.
pub fn parse_assignment(s: &str) -> Result<(String, String)> {
    let (k, v) = s.split_once('=').ok_or_else(|| invalid(format!("expected key=value, got '{s}'")))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(invalid(format!("empty key in '{s}'")));
    }
    Ok((k.to_string(), v.trim().to_string()))
}

fn format_grid(grid: &[f64]) -> String {
    grid.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl SweepConfig {
    /// Builds a config from defaults and `pairs`; later pairs win.
    pub fn from_pairs<K: AsRef<str>, V: AsRef<str>>(pairs: &[(K, V)]) -> Result<Self> {
        Self::default().with_overrides(pairs)
    }

    /// Parses config text.
    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_pairs(text)?)
    }

    /// Reads a config file.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    /// Applies `pairs` on top of this config and validates the result.
    pub fn with_overrides<K: AsRef<str>, V: AsRef<str>>(&self, pairs: &[(K, V)]) -> Result<Self> {
        let mut map: BTreeMap<String, String> = BTreeMap::new();
        let mut order: Vec<String> = Vec::new();
        for (k, v) in self.to_pairs().into_iter().chain(
            pairs.iter().map(|(k, v)| (k.as_ref().to_string(), v.as_ref().to_string())),
        ) {
            if !map.contains_key(&k) {
                order.push(k.clone());
            }
            map.insert(k, v);
        }
        let explicit_p = pairs.iter().any(|(k, _)| k.as_ref() == "p");
        let mut cfg = SweepConfig { f_params: Vec::new(), ..Self::default() };
        let mut c_value = None;
        for key in &order {
            let value = &map[key];
            match key.as_str() {
                "label" => cfg.label = value.clone(),
                "mode" => cfg.mode = value.parse()?,
                "f" => cfg.f_name = value.clone(),
                "axis" => cfg.axis = value.parse()?,
                "grid" => cfg.grid = parse_grid(value)?,
                "n" => cfg.n = parse_count(key, value)?,
                "p" => cfg.p = parse_f64(key, value)?,
                "c" => c_value = Some(parse_f64(key, value)?),
                "gamma" => cfg.gamma = parse_f64(key, value)?,
                "snr" => cfg.snr = parse_f64(key, value)?,
                "alignment" => cfg.alignment = value.parse()?,
                "trials" => cfg.trials = parse_count(key, value)?,
                "seed" => cfg.master_seed = parse_count(key, value)?,
                other => match other.strip_prefix("f.") {
                    Some(param) if !param.is_empty() => cfg.f_params.push((param.to_string(), parse_f64(key, value)?)),
                    _ => return Err(invalid(format!("unknown config key '{other}'"))),
                },
            }
        }
        if let Some(c) = c_value {
            let from_c = c * cfg.n as f64;
            if explicit_p && (from_c - cfg.p).abs() > 1e-9 * cfg.p.abs().max(1.0) {
                return Err(invalid(format!("p={} conflicts with c={c} at n={}", cfg.p, cfg.n)));
            }
            cfg.p = from_c;
        }
        // A new map name drops parameters inherited from the old one.
        if pairs.iter().any(|(k, _)| k.as_ref() == "f") && self.f_name != cfg.f_name {
            let explicit: Vec<&str> = pairs.iter().filter_map(|(k, _)| k.as_ref().strip_prefix("f.")).collect();
            cfg.f_params.retain(|(name, _)| explicit.contains(&name.as_str()));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Serializes every field as `(key, value)` pairs accepted by [`SweepConfig::from_pairs`].
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("label".to_string(), self.label.clone()),
            ("mode".into(), self.mode.to_string()),
            ("f".into(), self.f_name.clone()),
        ];
        out.extend(self.f_params.iter().map(|(k, v)| (format!("f.{k}"), v.to_string())));
        out.extend([
            ("axis".into(), self.axis.to_string()),
            ("grid".into(), format_grid(&self.grid)),
            ("n".into(), self.n.to_string()),
            ("p".into(), self.p.to_string()),
            ("gamma".into(), self.gamma.to_string()),
            ("snr".into(), self.snr.to_string()),
            ("alignment".into(), self.alignment.to_string()),
            ("trials".into(), self.trials.to_string()),
            ("seed".into(), self.master_seed.to_string()),
        ]);
        out
    }

    /// Config text that [`SweepConfig::from_text`] parses back to `self`.
    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Checks the invariants of a runnable config.
    pub fn validate(&self) -> Result<()> {
        if self.label.contains('\n') {
            return Err(invalid("label must be a single line"));
        }
        if self.grid.is_empty() {
            return Err(invalid("grid must not be empty"));
        }
        if self.grid.iter().any(|v| !v.is_finite()) {
            return Err(invalid("grid values must be finite"));
        }
        let inc = self.grid.windows(2).all(|w| w[1] > w[0]);
        let dec = self.grid.windows(2).all(|w| w[1] < w[0]);
        if !(inc || dec) {
            return Err(invalid("grid must be strictly monotone"));
        }
        if self.n < 2 {
            return Err(invalid(format!("n must be at least 2, got {}", self.n)));
        }
        if self.mode.is_empirical() && self.trials == 0 {
            return Err(invalid("trials must be at least 1 in empirical modes"));
        }
        if self.axis == Axis::A1Mix && self.f_name != "hermite-mix" {
            return Err(invalid("axis a1-mix requires f=hermite-mix"));
        }
        if self.alignment == AlignmentMode::Null && (self.axis == Axis::Snr || self.snr != 0.0) {
            return Err(invalid("alignment null requires snr=0 and a non-snr axis"));
        }
        if self.f_name == "softmax" {
            if self.mode != SweepMode::EmpiricalAttention {
                return Err(invalid("f=softmax is only available in empirical-attention mode"));
            }
            if self.f_params.iter().any(|(k, _)| k != "cap") {
                return Err(invalid("softmax accepts only f.cap"));
            }
        }
        for &x in &self.grid {
            let cell = self.cell(x);
            cell.validate(self)?;
        }
        if self.mode.uses_attention() && self.f_name != "softmax" {
            self.nonlinearity(self.grid[0])?;
        }
        Ok(())
    }

    /// Fixed parameters with the axis set to `x`.
    pub fn cell(&self, x: f64) -> Cell {
        let mut cell = Cell { n: self.n, p: self.p, gamma: self.gamma, snr: self.snr, r: None };
        match self.axis {
            Axis::Gamma => cell.gamma = x,
            Axis::Snr => cell.snr = x,
            Axis::P => cell.p = x,
            Axis::A1Mix => cell.r = Some(x),
        }
        cell
    }

    /// The raw map at axis value `x`.
    pub fn nonlinearity(&self, x: f64) -> Result<Nonlinearity> {
        let mut params: Vec<(&str, f64)> = self.f_params.iter().map(|(k, v)| (k.as_str(), *v)).collect();
        if self.axis == Axis::A1Mix {
            params.retain(|(k, _)| *k != "r");
            params.push(("r", x));
        }
        catalog(&self.f_name, &params)
    }

    fn softmax_cap(&self) -> f64 {
        self.f_params.iter().find(|(k, _)| k == "cap").map_or(DEFAULT_SOFTMAX_CAP, |&(_, v)| v)
    }
}

/// The parameters of one grid point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub n: usize,
    pub p: f64,
    pub gamma: f64,
    pub snr: f64,
    /// Hermite-mixture weight on the `a1-mix` axis.
    pub r: Option<f64>,
}

impl Cell {
    /// `c = p/n`.
    pub fn c(&self) -> f64 {
        self.p / self.n as f64
    }

    fn validate(&self, cfg: &SweepConfig) -> Result<()> {
        if !(self.p > 0.0) {
            return Err(invalid(format!("p must be positive, got {}", self.p)));
        }
        if !(self.gamma > 0.0) {
            return Err(invalid(format!("gamma must be positive, got {}", self.gamma)));
        }
        if !(self.snr >= 0.0) {
            return Err(invalid(format!("snr must be non-negative, got {}", self.snr)));
        }
        if cfg.mode.is_empirical() && self.p.round() < 3.0 {
            return Err(invalid(format!("simulation needs p >= 3, got {}", self.p)));
        }
        Ok(())
    }
}

/// One line of sweep output. Absent quantities are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub axis_value: f64,
    pub n: usize,
    pub p: f64,
    pub c: f64,
    pub gamma: f64,
    pub snr: f64,
    pub a1: Option<f64>,
    pub nu: Option<f64>,
    pub e_theory: Option<f64>,
    pub e_ridge_theory: Option<f64>,
    pub e_emp_mean: Option<f64>,
    pub e_emp_std: Option<f64>,
    pub e_emp_stderr: Option<f64>,
    pub trials: Option<usize>,
    pub master_seed: Option<u64>,
    pub solver_iterations: Option<usize>,
    pub residual: Option<f64>,
}

/// Formats `x` with 12 significant digits, plain decimal where practical.
pub fn format_real(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{:.11e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..12).contains(&exp) {
        let decimals = (11 - exp).max(0) as usize;
        let s = format!("{:.*}", decimals, x);
        trim_zeros(&s).to_string()
    } else {
        format!("{}e{exp}", trim_zeros(mantissa))
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// `x` rounded to the value its CSV text parses back to.
pub fn quantize(x: f64) -> f64 {
    format_real(x).parse().expect("formatted reals parse")
}

impl ResultRow {
    fn quantized(mut self) -> Self {
        let q = |v: &mut f64| *v = quantize(*v);
        let qo = |v: &mut Option<f64>| {
            if let Some(x) = v {
                *x = quantize(*x);
            }
        };
        q(&mut self.axis_value);
        q(&mut self.p);
        q(&mut self.c);
        q(&mut self.gamma);
        q(&mut self.snr);
        for v in [
            &mut self.a1,
            &mut self.nu,
            &mut self.e_theory,
            &mut self.e_ridge_theory,
            &mut self.e_emp_mean,
            &mut self.e_emp_std,
            &mut self.e_emp_stderr,
            &mut self.residual,
        ] {
            qo(v);
        }
        self
    }

    /// The CSV fields of this row.
    pub fn fields(&self) -> [String; 17] {
        let r = |v: Option<f64>| v.map(format_real).unwrap_or_default();
        let u = |v: Option<u64>| v.map(|x| x.to_string()).unwrap_or_default();
        [
            format_real(self.axis_value),
            self.n.to_string(),
            format_real(self.p),
            format_real(self.c),
            format_real(self.gamma),
            format_real(self.snr),
            r(self.a1),
            r(self.nu),
            r(self.e_theory),
            r(self.e_ridge_theory),
            r(self.e_emp_mean),
            r(self.e_emp_std),
            r(self.e_emp_stderr),
            u(self.trials.map(|t| t as u64)),
            u(self.master_seed),
            u(self.solver_iterations.map(|t| t as u64)),
            r(self.residual),
        ]
    }
}

/// Renders rows as CSV with a header line.
pub fn to_csv(rows: &[ResultRow]) -> String {
    let mut out = CSV_COLUMNS.join(",");
    out.push('\n');
    for row in rows {
        out.push_str(&row.fields().join(","));
        out.push('\n');
    }
    out
}

/// Parses CSV produced by [`to_csv`].
pub fn parse_csv(text: &str) -> Result<Vec<ResultRow>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| invalid("empty CSV"))?;
    if header != CSV_COLUMNS.join(",") {
        return Err(invalid(format!("unexpected CSV header '{header}'")));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != CSV_COLUMNS.len() {
                return Err(invalid(format!("row {}: expected {} fields, got {}", i + 1, CSV_COLUMNS.len(), f.len())));
            }
            let real = |j: usize| parse_f64(CSV_COLUMNS[j], f[j]);
            let opt = |j: usize| if f[j].is_empty() { Ok(None) } else { real(j).map(Some) };
            let count = |j: usize| -> Result<Option<u64>> {
                if f[j].is_empty() {
                    Ok(None)
                } else {
                    parse_count(CSV_COLUMNS[j], f[j]).map(Some)
                }
            };
            Ok(ResultRow {
                axis_value: real(0)?,
                n: parse_count(CSV_COLUMNS[1], f[1])?,
                p: real(2)?,
                c: real(3)?,
                gamma: real(4)?,
                snr: real(5)?,
                a1: opt(6)?,
                nu: opt(7)?,
                e_theory: opt(8)?,
                e_ridge_theory: opt(9)?,
                e_emp_mean: opt(10)?,
                e_emp_std: opt(11)?,
                e_emp_stderr: opt(12)?,
                trials: count(13)?.map(|v| v as usize),
                master_seed: count(14)?,
                solver_iterations: count(15)?.map(|v| v as usize),
                residual: opt(16)?,
            })
        })
        .collect()
}

/// Writes `contents` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let io = |e: std::io::Error| invalid(format!("cannot write {}: {e}", path.display()));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let name = path.file_name().ok_or_else(|| invalid(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.{}.tmp", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(contents.as_bytes())?;
        file.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(io)
}

/// Result of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub rows: Vec<ResultRow>,
    /// `(axis value, message)` for each grid point with a numerical failure.
    pub failures: Vec<(f64, String)>,
}

impl SweepOutcome {
    /// 0 when every grid point succeeded, 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.failures.is_empty() {
            0
        } else {
            2
        }
    }

    /// Writes the rows as CSV.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, &to_csv(&self.rows))
    }
}

/// Process exit code for an error: 1 for invalid input, 2 for numerical failure.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::InvalidArgument(_) => 1,
        _ => 2,
    }
}

fn summary_columns(s: &MonteCarloSummary) -> (Option<f64>, Option<f64>, Option<f64>, Option<usize>) {
    (Some(s.mean_e), Some(s.std_e), Some(s.stderr), Some(s.trials))
}

fn evaluate(cfg: &SweepConfig, x: f64) -> (ResultRow, Vec<String>) {
    let cell = cfg.cell(x);
    let c = cell.c();
    let mut errors = Vec::new();
    let mut row = ResultRow {
        axis_value: x,
        n: cell.n,
        p: cell.p,
        c,
        gamma: cell.gamma,
        snr: cell.snr,
        a1: None,
        nu: None,
        e_theory: None,
        e_ridge_theory: None,
        e_emp_mean: None,
        e_emp_std: None,
        e_emp_stderr: None,
        trials: None,
        master_seed: None,
        solver_iterations: None,
        residual: None,
    };
    match ridge_error(c, cell.gamma, cell.snr) {
        Ok(e) => row.e_ridge_theory = Some(e),
        Err(err) => errors.push(format!("ridge theory: {err}")),
    }

    let attention = cfg.mode.uses_attention() && cfg.f_name != "softmax";
    let mut model = None;
    if attention {
        let outcome = cfg.nonlinearity(x).and_then(|f| {
            let mo = moments(&f, DEFAULT_NODES)?;
            row.a1 = Some(mo.a1);
            row.nu = Some(mo.nu);
            model = Some(KernelModel::Attention(f.centered(&mo)));
            let params = NoiseSystemParams::from_moments(c, cell.gamma, &mo)?;
            attention_error(&params, &cfg.alignment.alignment(cell.snr)?, &SolverOptions::default())
        });
        match outcome {
            Ok(pred) => {
                row.e_theory = Some(pred.e_bar);
                row.solver_iterations = Some(pred.state.iterations);
                row.residual = Some(pred.state.residual);
            }
            Err(err) => errors.push(format!("attention theory: {err}")),
        }
    } else if cfg.f_name == "softmax" && cfg.mode.uses_attention() {
        model = Some(KernelModel::Softmax { cap: cfg.softmax_cap() });
    }

    if cfg.mode.is_empirical() {
        let model = match cfg.mode {
            SweepMode::EmpiricalRidge => Some(KernelModel::Ridge),
            _ => model,
        };
        if let Some(model) = model {
            let sim = ExperimentCell {
                n: cell.n,
                p: cell.p.round() as usize,
                gamma: cell.gamma,
                snr: cell.snr,
                mode: cfg.alignment,
                model,
            };
            let summary = if cfg.mode == SweepMode::Diagnostics {
                linearization_summary(&sim, cfg.trials, cfg.master_seed)
            } else {
                monte_carlo(&sim, cfg.trials, cfg.master_seed)
            };
            row.master_seed = Some(cfg.master_seed);
            match summary {
                Ok(s) => {
                    (row.e_emp_mean, row.e_emp_std, row.e_emp_stderr, row.trials) = summary_columns(&s);
                    errors.extend(s.failures.iter().map(|(seed, msg)| format!("trial seed {seed}: {msg}")));
                }
                Err(err) => errors.push(format!("monte carlo: {err}")),
            }
        }
    }
    (row.quantized(), errors)
}

/// Spectral distance between kernel and linearization over `trials` draws.
pub fn linearization_summary(cell: &ExperimentCell, trials: usize, master_seed: u64) -> Result<MonteCarloSummary> {
    let f = match &cell.model {
        KernelModel::Attention(f) => f.clone(),
        _ => return Err(invalid("linearization diagnostics need an entrywise map")),
    };
    if trials == 0 {
        return Err(invalid("trials must be at least 1"));
    }
    cell.validate()?;
    let outcomes: Vec<(u64, Result<f64>)> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let seed = mix64(master_seed, t);
            let res = cell.sample(seed).and_then(|(ds, w)| linearization_parts(&ds, &w, &f)).map(|r| r.residual);
            (seed, res)
        })
        .collect();
    let mut ok = Vec::new();
    let mut failures = Vec::new();
    for (seed, o) in outcomes {
        match o {
            Ok(v) => ok.push((seed, v)),
            Err(e) => failures.push((seed, e.to_string())),
        }
    }
    if ok.is_empty() {
        return Err(Error::NumericDomain(format!("all {trials} linearization trials failed")));
    }
    MonteCarloSummary::from_values(ok, failures)
}

/// Evaluates every grid point of `cfg`, in grid order.
///
/// Grid points run in parallel; a numerical failure leaves the affected fields
/// empty and is listed in [`SweepOutcome::failures`].
pub fn run_sweep(cfg: &SweepConfig) -> Result<SweepOutcome> {
    cfg.validate()?;
    let results: Vec<(ResultRow, Vec<String>)> = cfg.grid.par_iter().map(|&x| evaluate(cfg, x)).collect();
    let mut rows = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (row, errors) in results {
        for msg in errors {
            log::warn!("{} at {}={}: {msg}", cfg.label, cfg.axis, row.axis_value);
            failures.push((row.axis_value, msg));
        }
        rows.push(row);
    }
    Ok(SweepOutcome { rows, failures })
}

/// Runs `cfg` and writes its CSV to `path`.
pub fn run_sweep_to(cfg: &SweepConfig, path: &Path) -> Result<SweepOutcome> {
    let outcome = run_sweep(cfg)?;
    outcome.write_csv(path)?;
    Ok(outcome)
}

struct Preset {
    cfg: SweepConfig,
}

impl Preset {
    fn new(label: &str, mode: SweepMode, f: &str, axis: Axis, grid: Vec<f64>) -> Self {
        Self { cfg: SweepConfig { label: label.into(), mode, f_name: f.into(), axis, grid, ..SweepConfig::default() } }
    }

    fn sizes(mut self, n: usize, p: f64) -> Self {
        self.cfg.n = n;
        self.cfg.p = p;
        self
    }

    fn gamma(mut self, gamma: f64) -> Self {
        self.cfg.gamma = gamma;
        self
    }

    fn signal(mut self, alignment: AlignmentMode, snr: f64) -> Self {
        self.cfg.alignment = alignment;
        self.cfg.snr = snr;
        self
    }

    fn param(mut self, key: &str, value: f64) -> Self {
        self.cfg.f_params.push((key.into(), value));
        self
    }

    fn done(self) -> SweepConfig {
        self.cfg
    }
}

fn fraction_label(c: f64) -> String {
    if c >= 1.0 {
        format!("{c}")
    } else {
        format!("1-{}", (1.0 / c).round())
    }
}

/// The curves of a figure, one config per curve.
///
/// Curves whose reference shows Monte Carlo markers use an empirical mode with
/// 10 trials; theory-only curves use a theory mode.
pub fn figure_preset(name: &str) -> Result<Vec<SweepConfig>> {
    use AlignmentMode::*;
    use SweepMode::*;
    let gamma_grid = || logspace(1e-2, 1e3, 30);
    let p_grid = || linspace(1.0, 3.0, 30).into_iter().map(|t| 4096.0 / t).collect::<Vec<_>>();
    let snr_grid = || logspace(0.1, 10.0, 30);
    let cfgs = match name {
        "fig1a" => vec![Preset::new("fig1a", EmpiricalRidge, "tanh", Axis::Gamma, gamma_grid())
            .sizes(512, 2048.0)
            .signal(SignalOnly, 1.0)
            .done()],
        "fig1b" => vec![Preset::new("fig1b", EmpiricalRidge, "tanh", Axis::P, p_grid())
            .sizes(4096, 4096.0)
            .gamma(1e-5)
            .signal(SignalOnly, 1.0)
            .done()],
        "fig1c" => vec![Preset::new("fig1c", EmpiricalRidge, "tanh", Axis::Snr, logspace(0.1, 100.0, 30))
            .sizes(2048, 512.0)
            .gamma(1e-5)
            .signal(SignalOnly, 1.0)
            .done()],
        "fig2a" => vec![Preset::new("fig2a", EmpiricalAttention, "tanh", Axis::Gamma, gamma_grid())
            .sizes(1024, 4096.0)
            .done()],
        "fig2b" => vec![Preset::new("fig2b", EmpiricalAttention, "tanh", Axis::P, p_grid())
            .sizes(4096, 4096.0)
            .gamma(1e-2)
            .done()],
        "fig2c" => vec![Preset::new("fig2c", EmpiricalAttention, "tanh", Axis::Snr, snr_grid())
            .sizes(2048, 512.0)
            .gamma(1e-2)
            .signal(Aligned, 1.0)
            .done()],
        "fig3a" => vec![Preset::new("fig3a", EmpiricalAttention, "hermite-mix", Axis::A1Mix, linspace(0.1, 1.0, 20))
            .sizes(4096, 4096.0)
            .signal(Aligned, 1.0)
            .done()],
        "fig3b" | "fig3c" => {
            let (axis, grid, n, p, gamma) = if name == "fig3b" {
                let grid: Vec<f64> = linspace(512.0, 4096.0, 30).into_iter().map(f64::round).collect();
                (Axis::P, grid, 4096, 4096.0, 1.0)
            } else {
                (Axis::Snr, snr_grid(), 2048, 512.0, 1e-2)
            };
            let curve = |f: &str, mode| {
                Preset::new(&format!("{name}-{f}"), mode, f, axis, grid.clone())
                    .sizes(n, p)
                    .gamma(gamma)
                    .signal(Aligned, 1.0)
            };
            vec![
                curve("cos", EmpiricalAttention).done(),
                curve("tanh", TheoryAttention).done(),
                curve("clamped-linear", TheoryAttention).param("bound", 5.0).done(),
            ]
        }
        "fig4" => [0.25, 1.0, 4.0]
            .iter()
            .map(|&c| {
                Preset::new(&format!("fig4-c{}", fraction_label(c)), TheoryAttention, "tanh", Axis::Snr, snr_grid())
                    .sizes(2048, 2048.0 * c)
                    .gamma(1.0)
                    .signal(AlignedUnit, 1.0)
                    .done()
            })
            .collect(),
        "fig5" => {
            let mut out = Vec::new();
            for c in [0.5, 0.25, 0.125, 0.0625] {
                for gamma in [10.0, 1.0, 0.1] {
                    for (f, extra) in [("tanh", None), ("clamped-linear", Some(5.0))] {
                        let mut preset = Preset::new(
                            &format!("fig5-c{}-gamma{gamma}-{f}", fraction_label(c)),
                            TheoryAttention,
                            f,
                            Axis::Snr,
                            snr_grid(),
                        )
                        .sizes(2048, 2048.0 * c)
                        .gamma(gamma)
                        .signal(AlignedUnit, 1.0);
                        if let Some(b) = extra {
                            preset = preset.param("bound", b);
                        }
                        out.push(preset.done());
                    }
                }
                out.push(
                    Preset::new(&format!("fig5-n2048-p{}-tanh", 2048.0 * c), EmpiricalAttention, "tanh", Axis::Snr, snr_grid())
                        .sizes(2048, 2048.0 * c)
                        .gamma(0.02)
                        .signal(AlignedUnit, 1.0)
                        .done(),
                );
            }
            out
        }
        _ => {
            return Err(invalid(format!("unknown figure '{name}'; expected one of {}", FIGURE_NAMES.join(", "))));
        }
    };
    for cfg in &cfgs {
        cfg.validate()?;
    }
    Ok(cfgs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logspace_hits_end_points_exactly() {
        let g = logspace(1e-2, 1e3, 30);
        assert_eq!(g[0], 1e-2);
        assert_eq!(g[29], 1e3);
        assert!((g[1] - 0.014874).abs() < 1e-6);
    }

    #[test]
    fn format_real_keeps_twelve_digits() {
        assert_eq!(format_real(0.1), "0.1");
        assert_eq!(format_real(1365.3333333333333), "1365.33333333");
        assert_eq!(format_real(1e-7), "1e-7");
        assert_eq!(format_real(-2.5), "-2.5");
    }
}
