//! Run configuration files.
//!
//! A config is a TOML document with a top-level `kind` and the sections
//! `[model]`, `[ensemble]`, `[analysis]`, `[output]` and `[budget]`. Unknown
//! keys are rejected. Scalars may be given where a list is accepted.

use std::path::{Path, PathBuf};

use qfdt_core::experiments::{
    AnalysisSpec, ChainInitial, ChainSpec, EnsembleSpec, ExperimentKind, ExperimentSpec, ModelSpec,
    ParityObservable, RmtSpec, DEFAULT_BUDGET_GB,
};
use qfdt_core::models::SpinChainParams;
use serde::Deserialize;

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(untagged)]
enum Number {
    Int(i64),
    Float(f64),
}

impl Number {
    fn get(self) -> f64 {
        match self {
            Number::Int(i) => i as f64,
            Number::Float(x) => x,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T> OneOrMany<T> {
    fn into_vec(self) -> Vec<T> {
        match self {
            OneOrMany::One(x) => vec![x],
            OneOrMany::Many(v) => v,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSection {
    family: Option<String>,
    n: Option<OneOrMany<usize>>,
    g: Option<OneOrMany<Number>>,
    observables: Option<OneOrMany<String>>,
    bz_system: Option<OneOrMany<Number>>,
    bx_system: Option<Number>,
    bz_bath: Option<Number>,
    bx_bath: Option<Number>,
    jz: Option<Number>,
    jx: Option<Number>,
    jz_sb: Option<Number>,
    jx_sb: Option<Number>,
    coupled_site: Option<usize>,
    coupling_scales: Option<OneOrMany<Number>>,
    initial_state: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnsembleSection {
    n_realizations: Option<usize>,
    n_initial_states: Option<usize>,
    seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnalysisSection {
    epsilon: Option<Number>,
    central_fraction: Option<Number>,
    fit_horizon: Option<Number>,
    fit_samples: Option<usize>,
    window_start: Option<Number>,
    window_length: Option<Number>,
    window_samples: Option<usize>,
    dos_width: Option<Number>,
    profiles: Option<bool>,
    profile_points: Option<usize>,
    emit_series: Option<bool>,
    series_horizon: Option<Number>,
    series_samples: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct OutputSection {
    dir: Option<PathBuf>,
    cache: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct BudgetSection {
    memory_gb: Option<Number>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    kind: Option<String>,
    #[serde(default)]
    model: ModelSection,
    #[serde(default)]
    ensemble: EnsembleSection,
    #[serde(default)]
    analysis: AnalysisSection,
    #[serde(default)]
    output: OutputSection,
    #[serde(default)]
    budget: BudgetSection,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub budget_gb: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Config {
    pub spec: ExperimentSpec,
    pub out_dir: PathBuf,
    pub use_cache: bool,
}

pub const DEFAULT_OUT_DIR: &str = "qfdt-out";

fn missing(key: &str) -> String {
    format!("missing required key {key}")
}

fn floats(v: Option<OneOrMany<Number>>) -> Option<Vec<f64>> {
    v.map(|x| x.into_vec().into_iter().map(Number::get).collect())
}

pub fn load(path: &Path, overrides: &Overrides) -> Result<Config, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    parse(&text, overrides)
}

pub fn parse(text: &str, overrides: &Overrides) -> Result<Config, String> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| format!("invalid config: {e}"))?;
    let kind: ExperimentKind = raw
        .kind
        .as_deref()
        .ok_or_else(|| missing("kind"))?
        .parse()
        .map_err(|e| format!("{e}"))?;
    let m = raw.model;
    let family = match (kind, m.family.as_deref()) {
        (ExperimentKind::TimeDependence, None) => return Err(missing("[model].family")),
        (_, Some("rmt")) | (ExperimentKind::RmtFdt, None) => "rmt",
        (_, Some("spin_chain")) | (_, None) => "spin_chain",
        (_, Some(other)) => {
            return Err(format!("[model].family must be rmt or spin_chain, got {other:?}"));
        }
    };
    let n = m.n.ok_or_else(|| missing("[model].n"))?.into_vec();
    let model = if family == "rmt" {
        let g = floats(m.g).ok_or_else(|| missing("[model].g"))?;
        let observables = match m.observables {
            Some(list) => list
                .into_vec()
                .iter()
                .map(|s| s.parse::<ParityObservable>().map_err(|e| format!("[model].observables: {e}")))
                .collect::<Result<Vec<_>, _>>()?,
            None => vec![ParityObservable::Odd, ParityObservable::Sym],
        };
        for (key, present) in [
            ("bz_system", m.bz_system.is_some()),
            ("bx_system", m.bx_system.is_some()),
            ("initial_state", m.initial_state.is_some()),
            ("coupling_scales", m.coupling_scales.is_some()),
        ] {
            if present {
                return Err(format!("[model].{key} does not apply to the rmt family"));
            }
        }
        ModelSpec::Rmt(RmtSpec {
            dimensions: n,
            couplings: g,
            observables,
        })
    } else {
        if m.g.is_some() || m.observables.is_some() {
            return Err("[model].g and [model].observables apply only to the rmt family".into());
        }
        let mut base = SpinChainParams::standard(n[0]);
        let set = |slot: &mut f64, v: Option<Number>| {
            if let Some(x) = v {
                *slot = x.get();
            }
        };
        set(&mut base.bx_system, m.bx_system);
        set(&mut base.bz_bath, m.bz_bath);
        set(&mut base.bx_bath, m.bx_bath);
        set(&mut base.jz, m.jz);
        set(&mut base.jx, m.jx);
        set(&mut base.jz_sb, m.jz_sb);
        set(&mut base.jx_sb, m.jx_sb);
        let bz_values = floats(m.bz_system).unwrap_or_default();
        if kind == ExperimentKind::SpinchainProductState && bz_values.is_empty() {
            return Err(missing("[model].bz_system"));
        }
        if kind == ExperimentKind::GeneralizedFdtBx && m.bx_system.is_none() {
            return Err(missing("[model].bx_system"));
        }
        let scales = floats(m.coupling_scales);
        if kind == ExperimentKind::CouplingSweep && scales.is_none() {
            return Err(missing("[model].coupling_scales"));
        }
        let initial = match m.initial_state.as_deref() {
            Some(s) => ChainInitial::parse(s).map_err(|e| format!("[model].initial_state: {e}"))?,
            None if kind == ExperimentKind::SpinchainProductState => ChainInitial::AllDown,
            None => ChainInitial::BathEigenstate,
        };
        ModelSpec::SpinChain(ChainSpec {
            sizes: n,
            base,
            coupled_site: m.coupled_site,
            bz_system_values: bz_values,
            coupling_scales: scales.unwrap_or_else(|| vec![1.0]),
            initial,
        })
    };

    let e = raw.ensemble;
    let seed = overrides
        .seed
        .or(e.seed)
        .ok_or_else(|| missing("[ensemble].seed"))?;
    let ensemble = EnsembleSpec {
        n_realizations: e.n_realizations.unwrap_or(1),
        n_initial_states: e.n_initial_states.unwrap_or(5),
        seed,
    };

    let a = raw.analysis;
    let d = AnalysisSpec::default();
    let num = |v: Option<Number>, default: f64| v.map_or(default, Number::get);
    let analysis = AnalysisSpec {
        epsilon: a.epsilon.map(Number::get),
        central_fraction: num(a.central_fraction, d.central_fraction),
        fit_horizon: a.fit_horizon.map(Number::get),
        fit_samples: a.fit_samples.unwrap_or(d.fit_samples),
        window_start: num(a.window_start, d.window_start),
        window_length: num(a.window_length, d.window_length),
        window_samples: a.window_samples.unwrap_or(d.window_samples),
        dos_width: num(a.dos_width, d.dos_width),
        profiles: a.profiles.unwrap_or(d.profiles),
        profile_points: a.profile_points.unwrap_or(d.profile_points),
        emit_series: a.emit_series.unwrap_or(kind == ExperimentKind::TimeDependence),
        series_horizon: a.series_horizon.map(Number::get),
        series_samples: a.series_samples.unwrap_or(d.series_samples),
    };

    let budget_gb = overrides
        .budget_gb
        .or(raw.budget.memory_gb.map(Number::get))
        .unwrap_or(DEFAULT_BUDGET_GB);
    let spec = ExperimentSpec {
        kind,
        model,
        ensemble,
        analysis,
        budget_gb,
    };
    spec.validate().map_err(|e| format!("{e}"))?;
    Ok(Config {
        spec,
        out_dir: overrides
            .out_dir
            .clone()
            .or(raw.output.dir)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR)),
        use_cache: raw.output.cache.unwrap_or(false),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const RMT: &str = r#"
kind = "rmt_fdt"
[model]
n = 200
g = [0.05, 0.1]
[ensemble]
seed = 3
"#;

    #[test]
    fn minimal_rmt_config() {
        let c = parse(RMT, &Overrides::default()).unwrap();
        match &c.spec.model {
            ModelSpec::Rmt(r) => {
                assert_eq!(r.dimensions, vec![200]);
                assert_eq!(r.couplings, vec![0.05, 0.1]);
                assert_eq!(r.observables.len(), 2);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(c.spec.ensemble.n_initial_states, 5);
        assert_eq!(c.out_dir, PathBuf::from(DEFAULT_OUT_DIR));
    }

    #[test]
    fn missing_keys_are_named() {
        let text = RMT.replace("g = [0.05, 0.1]\n", "");
        let err = parse(&text, &Overrides::default()).unwrap_err();
        assert!(err.contains("[model].g"), "{err}");
        let text = RMT.replace("seed = 3\n", "");
        assert!(parse(&text, &Overrides::default()).unwrap_err().contains("[ensemble].seed"));
        let over = Overrides {
            seed: Some(9),
            ..Overrides::default()
        };
        assert_eq!(parse(&text, &over).unwrap().spec.ensemble.seed, 9);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = RMT.replace("n = 200", "n = 200\ncolour = 1");
        let err = parse(&text, &Overrides::default()).unwrap_err();
        assert!(err.contains("colour"), "{err}");
        let text = format!("{RMT}\n[extra]\nx = 1\n");
        assert!(parse(&text, &Overrides::default()).is_err());
    }

    #[test]
    fn chain_defaults_and_kind_requirements() {
        let text = "kind = \"spinchain_fdt\"\n[model]\nn = [10, 11]\njz = 0\n[ensemble]\nseed = 1\n";
        let c = parse(text, &Overrides::default()).unwrap();
        match &c.spec.model {
            ModelSpec::SpinChain(s) => {
                assert_eq!(s.sizes, vec![10, 11]);
                assert_eq!(s.base.jz, 0.0);
                assert_eq!(s.base.jx_sb, 0.4);
                assert_eq!(s.initial, ChainInitial::BathEigenstate);
            }
            other => panic!("{other:?}"),
        }
        let sweep = text.replace("spinchain_fdt", "coupling_sweep");
        assert!(parse(&sweep, &Overrides::default()).unwrap_err().contains("coupling_scales"));
        let bx = text.replace("spinchain_fdt", "generalized_fdt_bx");
        assert!(parse(&bx, &Overrides::default()).unwrap_err().contains("bx_system"));
        let td = text.replace("spinchain_fdt", "time_dependence");
        assert!(parse(&td, &Overrides::default()).unwrap_err().contains("[model].family"));
    }

    #[test]
    fn overrides_win() {
        let over = Overrides {
            seed: None,
            out_dir: Some("elsewhere".into()),
            budget_gb: Some(0.5),
        };
        let c = parse(RMT, &over).unwrap();
        assert_eq!(c.out_dir, PathBuf::from("elsewhere"));
        assert_eq!(c.spec.budget_gb, 0.5);
    }
}
