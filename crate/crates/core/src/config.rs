//! Flat `key = value` configuration text with dotted keys.
//!
//! Every key in [`keys`] must appear exactly once; `#` starts a comment.
//! Floats are written in Rust's shortest round-trip form so a resolved
//! config reproduces a run exactly.

use num_complex::Complex64 as C64;
use thiserror::Error;

use crate::adiabatic::{CouplingModulation, PulseShape};
use crate::protocol::{Mode, NodeConfig, ProtocolConfig};

pub const SEED_ENV: &str = "CLONESIM_SEED";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("missing key `{0}`")]
    Missing(String),
    #[error("unknown key `{0}`")]
    Unknown(String),
    #[error("key `{0}` given more than once")]
    Duplicate(String),
    #[error("key `{key}`: cannot parse `{value}`")]
    Value { key: String, value: String },
    #[error("`{0}` is not sweepable")]
    NotSweepable(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

const NODE_KEYS: [&str; 10] = [
    "delta",
    "gamma",
    "g",
    "kappa",
    "epsilon",
    "nu",
    "pulse.shape",
    "pulse.omega_max",
    "pulse.t_total",
    "pulse.hold_fraction",
];

/// Every accepted key, in file order.
pub fn keys() -> Vec<String> {
    let mut out: Vec<String> = ["mode", "seed", "dt", "mc_trials", "emission_floor", "input.a", "input.b"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for node in ["alice", "bob"] {
        out.extend(NODE_KEYS.iter().map(|k| format!("{node}.{k}")));
    }
    out.extend(["detector.eta", "detector.dark_rate", "detector.window"].iter().map(|s| s.to_string()));
    out
}

/// Shorthand sweep keys that set a value on both nodes.
pub const SWEEP_ALIASES: [&str; 5] = ["t_total", "epsilon", "nu", "kappa", "gamma"];

/// Keys accepted by [`with_value`].
pub fn sweepable() -> Vec<String> {
    let mut out: Vec<String> = SWEEP_ALIASES.iter().map(|s| s.to_string()).collect();
    out.extend(["eta", "dark_rate", "window"].iter().map(|s| s.to_string()));
    out.extend(keys().into_iter().filter(|k| {
        !matches!(k.as_str(), "mode" | "seed" | "mc_trials" | "input.a" | "input.b")
            && !k.ends_with("pulse.shape")
    }));
    out
}

pub fn parse_complex(s: &str) -> Option<C64> {
    let t: String = s.chars().filter(|c| !c.is_whitespace()).collect();
    if t.is_empty() {
        return None;
    }
    if let Ok(x) = t.parse::<f64>() {
        return Some(C64::new(x, 0.0));
    }
    let body = t.strip_suffix('i')?;
    // split at the last sign that is not part of an exponent
    let bytes = body.as_bytes();
    let split = (1..bytes.len())
        .rev()
        .find(|&k| (bytes[k] == b'+' || bytes[k] == b'-') && !matches!(bytes[k - 1], b'e' | b'E'));
    let parse_im = |x: &str| match x {
        "" | "+" => Some(1.0),
        "-" => Some(-1.0),
        _ => x.parse::<f64>().ok(),
    };
    match split {
        Some(k) => Some(C64::new(body[..k].parse().ok()?, parse_im(&body[k..])?)),
        None => Some(C64::new(0.0, parse_im(body)?)),
    }
}

pub fn format_complex(z: C64) -> String {
    if z.im == 0.0 {
        format!("{:?}", z.re)
    } else if z.im.is_sign_negative() {
        format!("{:?}-{:?}i", z.re, -z.im)
    } else {
        format!("{:?}+{:?}i", z.re, z.im)
    }
}

fn shape_name(s: PulseShape) -> &'static str {
    match s {
        PulseShape::SinSquaredRamp => "sin2",
        PulseShape::TanhRamp => "tanh",
        PulseShape::Linear => "linear",
    }
}

fn value_err(key: &str, value: &str) -> ConfigError {
    ConfigError::Value {
        key: key.into(),
        value: value.into(),
    }
}

fn float(key: &str, v: &str) -> Result<f64> {
    v.parse::<f64>()
        .ok()
        .filter(|x| x.is_finite())
        .ok_or_else(|| value_err(key, v))
}

fn node_mut<'a>(cfg: &'a mut ProtocolConfig, node: &str) -> &'a mut NodeConfig {
    if node == "alice" {
        &mut cfg.alice
    } else {
        &mut cfg.bob
    }
}

/// Set one key from its textual value.
pub fn set(cfg: &mut ProtocolConfig, key: &str, v: &str) -> Result<()> {
    match key {
        "mode" => {
            cfg.mode = match v {
                "analytic" => Mode::Analytic,
                "dynamic" => Mode::Dynamic,
                _ => return Err(value_err(key, v)),
            }
        }
        "seed" => cfg.seed = v.parse().map_err(|_| value_err(key, v))?,
        "dt" => {
            cfg.dt = match v {
                "auto" => None,
                _ => Some(float(key, v)?),
            }
        }
        "mc_trials" => cfg.mc_trials = v.parse().map_err(|_| value_err(key, v))?,
        "emission_floor" => cfg.emission_floor = float(key, v)?,
        "input.a" => cfg.input.a = parse_complex(v).ok_or_else(|| value_err(key, v))?,
        "input.b" => cfg.input.b = parse_complex(v).ok_or_else(|| value_err(key, v))?,
        "detector.eta" => cfg.detector.eta = float(key, v)?,
        "detector.dark_rate" => cfg.detector.dark_rate = float(key, v)?,
        "detector.window" => cfg.detector.window = float(key, v)?,
        _ => {
            let (node, rest) = key.split_once('.').ok_or_else(|| ConfigError::Unknown(key.into()))?;
            if node != "alice" && node != "bob" {
                return Err(ConfigError::Unknown(key.into()));
            }
            let n = node_mut(cfg, node);
            match rest {
                "delta" => n.params.delta = float(key, v)?,
                "gamma" => n.params.gamma = float(key, v)?,
                "g" => n.params.g = float(key, v)?,
                "kappa" => n.params.kappa = float(key, v)?,
                "epsilon" | "nu" => {
                    let x = float(key, v)?;
                    let mut m = n.params.modulation.unwrap_or(CouplingModulation { epsilon: 0.0, nu: 0.0 });
                    if rest == "epsilon" {
                        m.epsilon = x;
                    } else {
                        m.nu = x;
                    }
                    n.params.modulation = Some(m);
                }
                "pulse.shape" => {
                    n.pulse.shape = match v {
                        "sin2" => PulseShape::SinSquaredRamp,
                        "tanh" => PulseShape::TanhRamp,
                        "linear" => PulseShape::Linear,
                        _ => return Err(value_err(key, v)),
                    }
                }
                "pulse.omega_max" => n.pulse.omega_max = float(key, v)?,
                "pulse.t_total" => n.pulse.t_total = float(key, v)?,
                "pulse.hold_fraction" => n.pulse.hold_fraction = float(key, v)?,
                _ => return Err(ConfigError::Unknown(key.into())),
            }
        }
    }
    Ok(())
}

/// A zero modulation depth means a constant coupling.
fn normalize_modulation(cfg: &mut ProtocolConfig) {
    for n in [&mut cfg.alice, &mut cfg.bob] {
        if n.params.modulation.is_some_and(|m| m.epsilon == 0.0) {
            n.params.modulation = None;
        }
    }
}

pub fn parse(text: &str) -> Result<ProtocolConfig> {
    let mut cfg = ProtocolConfig::default();
    let all = keys();
    let mut seen = std::collections::BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
        let (k, v) = (k.trim(), v.trim());
        if !all.iter().any(|a| a == k) {
            return Err(ConfigError::Unknown(k.into()));
        }
        if !seen.insert(k.to_string()) {
            return Err(ConfigError::Duplicate(k.into()));
        }
        set(&mut cfg, k, v)?;
    }
    if let Some(missing) = all.iter().find(|k| !seen.contains(*k)) {
        return Err(ConfigError::Missing(missing.clone()));
    }
    normalize_modulation(&mut cfg);
    Ok(cfg)
}

pub fn to_text(cfg: &ProtocolConfig) -> String {
    let f = |x: f64| format!("{x:?}");
    let mut out = String::from("# clonesim configuration\n");
    let mut line = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
    line(
        "mode",
        match cfg.mode {
            Mode::Analytic => "analytic".into(),
            Mode::Dynamic => "dynamic".into(),
        },
    );
    line("seed", cfg.seed.to_string());
    line("dt", cfg.dt.map_or("auto".into(), f));
    line("mc_trials", cfg.mc_trials.to_string());
    line("emission_floor", f(cfg.emission_floor));
    line("input.a", format_complex(cfg.input.a));
    line("input.b", format_complex(cfg.input.b));
    for (name, n) in [("alice", &cfg.alice), ("bob", &cfg.bob)] {
        let p = &n.params;
        let m = p.modulation.unwrap_or(CouplingModulation { epsilon: 0.0, nu: 0.0 });
        line(&format!("{name}.delta"), f(p.delta));
        line(&format!("{name}.gamma"), f(p.gamma));
        line(&format!("{name}.g"), f(p.g));
        line(&format!("{name}.kappa"), f(p.kappa));
        line(&format!("{name}.epsilon"), f(m.epsilon));
        line(&format!("{name}.nu"), f(m.nu));
        line(&format!("{name}.pulse.shape"), shape_name(n.pulse.shape).into());
        line(&format!("{name}.pulse.omega_max"), f(n.pulse.omega_max));
        line(&format!("{name}.pulse.t_total"), f(n.pulse.t_total));
        line(&format!("{name}.pulse.hold_fraction"), f(n.pulse.hold_fraction));
    }
    line("detector.eta", f(cfg.detector.eta));
    line("detector.dark_rate", f(cfg.detector.dark_rate));
    line("detector.window", f(cfg.detector.window));
    out
}

/// Copy of `base` with one numeric key set; aliases set both nodes.
pub fn with_value(base: &ProtocolConfig, key: &str, value: f64) -> Result<ProtocolConfig> {
    if !sweepable().iter().any(|k| k == key) {
        return Err(ConfigError::NotSweepable(key.into()));
    }
    let mut cfg = *base;
    let v = format!("{value:?}");
    match key {
        "t_total" => {
            set(&mut cfg, "alice.pulse.t_total", &v)?;
            set(&mut cfg, "bob.pulse.t_total", &v)?;
        }
        "eta" | "dark_rate" | "window" => set(&mut cfg, &format!("detector.{key}"), &v)?,
        k if SWEEP_ALIASES.contains(&k) => {
            set(&mut cfg, &format!("alice.{k}"), &v)?;
            set(&mut cfg, &format!("bob.{k}"), &v)?;
        }
        k => set(&mut cfg, k, &v)?,
    }
    normalize_modulation(&mut cfg);
    Ok(cfg)
}

/// Applies a `CLONESIM_SEED` value, if any.
pub fn apply_seed_override(cfg: &mut ProtocolConfig, env_value: Option<&str>) -> Result<()> {
    if let Some(v) = env_value {
        cfg.seed = v.trim().parse().map_err(|_| value_err(SEED_ENV, v))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ideal_cloner::InputQubit;

    #[test]
    fn round_trip() {
        let mut cfg = ProtocolConfig::default();
        cfg.mode = Mode::Dynamic;
        cfg.input = InputQubit::from_bloch(1.0, 0.4);
        cfg.alice.params.modulation = Some(CouplingModulation { epsilon: 0.1, nu: 0.7 });
        cfg.dt = Some(0.05);
        let text = to_text(&cfg);
        assert_eq!(parse(&text).unwrap(), cfg);
        assert_eq!(to_text(&parse(&text).unwrap()), text);
    }

    #[test]
    fn missing_and_unknown_keys_are_named() {
        let text = to_text(&ProtocolConfig::default());
        let without: String = text.lines().filter(|l| !l.starts_with("alice.g ")).map(|l| format!("{l}\n")).collect();
        assert_eq!(parse(&without), Err(ConfigError::Missing("alice.g".into())));
        let extra = format!("{text}alice.colour = 3\n");
        assert_eq!(parse(&extra), Err(ConfigError::Unknown("alice.colour".into())));
        let dup = format!("{text}seed = 3\n");
        assert_eq!(parse(&dup), Err(ConfigError::Duplicate("seed".into())));
        let bad = text.replace("detector.eta = 1.0", "detector.eta = lots");
        assert!(matches!(parse(&bad), Err(ConfigError::Value { key, .. }) if key == "detector.eta"));
    }

    #[test]
    fn complex_literals() {
        assert_eq!(parse_complex("0.6"), Some(C64::new(0.6, 0.0)));
        assert_eq!(parse_complex("0.6+0.8i"), Some(C64::new(0.6, 0.8)));
        assert_eq!(parse_complex("-i"), Some(C64::new(0.0, -1.0)));
        assert_eq!(parse_complex("1e-3-2e+1i"), Some(C64::new(1e-3, -20.0)));
        assert_eq!(parse_complex("0.5i"), Some(C64::new(0.0, 0.5)));
        assert_eq!(parse_complex("abc"), None);
        for z in [C64::new(0.1, -0.2), C64::new(-1.0, 0.0), C64::new(0.0, 3.5)] {
            assert_eq!(parse_complex(&format_complex(z)), Some(z));
        }
    }

    #[test]
    fn sweep_values_and_aliases() {
        let base = ProtocolConfig::default();
        let c = with_value(&base, "t_total", 50.0).unwrap();
        assert_eq!((c.alice.pulse.t_total, c.bob.pulse.t_total), (50.0, 50.0));
        let c = with_value(&base, "epsilon", 0.2).unwrap();
        assert_eq!(c.bob.params.modulation.unwrap().epsilon, 0.2);
        let c = with_value(&c, "epsilon", 0.0).unwrap();
        assert!(c.alice.params.modulation.is_none());
        assert_eq!(with_value(&base, "eta", 0.5).unwrap().detector.eta, 0.5);
        assert!(matches!(with_value(&base, "colour", 1.0), Err(ConfigError::NotSweepable(_))));
    }

    #[test]
    fn seed_override() {
        let mut cfg = ProtocolConfig::default();
        apply_seed_override(&mut cfg, Some("42")).unwrap();
        assert_eq!(cfg.seed, 42);
        assert!(apply_seed_override(&mut cfg, Some("x")).is_err());
        apply_seed_override(&mut cfg, None).unwrap();
        assert_eq!(cfg.seed, 42);
    }
}
