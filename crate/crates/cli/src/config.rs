//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; blank lines and lines starting with `#` are
//! ignored. Keys are applied on top of the reference benchmark. Settings
//! derived from the levels or the world scale (exclusion radii, frustum
//! depth, evaluation distances) are recomputed when either changes, unless
//! they are given explicitly.

use std::fmt::Write as _;
use std::path::PathBuf;

use cellcode::cellgrid::{GeoPoint, LevelConfig};
use cellcode::experiment::BenchmarkConfig;
use cellcode::loss::{AerialInterp, GroundInterp};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub bench: BenchmarkConfig,
    /// Region center in degrees; kept separately so it prints exactly.
    pub center_deg: (f64, f64),
    pub out_dir: PathBuf,
    /// Fixed hybrid weight for `build-db`; `None` uses the calibrated value.
    pub kappa: Option<f64>,
}

type Getter = fn(&RunConfig) -> String;
type Setter = fn(&mut RunConfig, &str) -> Result<(), String>;

struct Field {
    key: &'static str,
    get: Getter,
    set: Setter,
}

fn num<T: std::str::FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?} as a number"))
}

fn flag(v: &str) -> Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got {v:?}")),
    }
}

fn list<T: std::str::FromStr>(v: &str) -> Result<Vec<T>, String> {
    v.split(',').map(|x| num(x.trim())).collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn ground_interp_name(g: GroundInterp) -> &'static str {
    match g {
        GroundInterp::Nearest => "nearest",
        GroundInterp::FrustumWeights => "frustum",
        GroundInterp::FrustumAllCells => "frustum_all",
    }
}

pub fn parse_ground_interp(v: &str) -> Result<GroundInterp, String> {
    match v {
        "nearest" => Ok(GroundInterp::Nearest),
        "frustum" => Ok(GroundInterp::FrustumWeights),
        "frustum_all" => Ok(GroundInterp::FrustumAllCells),
        _ => Err(format!("unknown ground interpolation {v:?} (nearest, frustum, frustum_all)")),
    }
}

fn aerial_interp_name(a: AerialInterp) -> &'static str {
    match a {
        AerialInterp::Nearest => "nearest",
        AerialInterp::Bilinear => "bilinear",
    }
}

pub fn parse_aerial_interp(v: &str) -> Result<AerialInterp, String> {
    match v {
        "nearest" => Ok(AerialInterp::Nearest),
        "bilinear" => Ok(AerialInterp::Bilinear),
        _ => Err(format!("unknown aerial interpolation {v:?} (nearest, bilinear)")),
    }
}

macro_rules! field {
    ($key:literal, $c:ident => $place:expr, $parse:expr) => {
        Field {
            key: $key,
            get: |$c| $place.to_string(),
            set: |$c, v| {
                $place = $parse(v)?;
                Ok(())
            },
        }
    };
}

/// Keys that other defaults depend on; applied right after the levels and
/// before everything else.
const STRUCTURAL: [&str; 2] = ["seed", "geo_scale"];

fn fields() -> Vec<Field> {
    vec![
        Field {
            key: "seed",
            get: |c| c.bench.seed.to_string(),
            set: |c, v| {
                c.bench = c.bench.clone().with_seed(num(v)?);
                Ok(())
            },
        },
        Field {
            key: "prototype_level",
            get: |c| c.bench.levels.prototype_level().to_string(),
            // Both levels are validated together in `parse`.
            set: |_, _| Ok(()),
        },
        Field {
            key: "aerial_level",
            get: |c| c.bench.levels.aerial_level().to_string(),
            // Both levels are validated together in `parse`.
            set: |_, _| Ok(()),
        },
        field!("geo_scale", c => c.bench.world.geo_scale, num),
        field!("center_lat_deg", c => c.center_deg.0, num),
        field!("center_lon_deg", c => c.center_deg.1, num),
        field!("region_radius_m", c => c.bench.world.region_radius_m, num),
        field!("latent_dim", c => c.bench.world.latent_dim, num),
        field!("n_low_freq", c => c.bench.world.n_low_freq, num),
        field!("n_high_freq", c => c.bench.world.n_high_freq, num),
        field!("low_wavelength_min_m", c => c.bench.world.low_wavelength_m.0, num),
        field!("low_wavelength_max_m", c => c.bench.world.low_wavelength_m.1, num),
        field!("high_wavelength_min_m", c => c.bench.world.high_wavelength_m.0, num),
        field!("high_wavelength_max_m", c => c.bench.world.high_wavelength_m.1, num),
        field!("ground_dim", c => c.bench.world.ground_feature_dim, num),
        field!("aerial_dim", c => c.bench.world.aerial_feature_dim, num),
        field!("noise_sigma", c => c.bench.world.noise_sigma, num),
        field!("density_bumps", c => c.bench.density_bumps, num),
        field!("density_background", c => c.bench.density_background, num),
        field!("train_places", c => c.bench.counts.train_places, num),
        field!("test_places", c => c.bench.counts.test_places, num),
        field!("steps", c => c.bench.train.steps, num),
        field!("batch_size", c => c.bench.train.batch_size, num),
        field!("lr_encoders", c => c.bench.train.lr_encoders, num),
        field!("lr_prototypes", c => c.bench.train.lr_prototypes, num),
        field!("lr_floor", c => c.bench.train.lr_floor, num),
        field!("shard_count", c => c.bench.train.shard_count, num),
        field!("hidden_dim", c => c.bench.train.hidden_dim, num),
        field!("embed_dim", c => c.bench.train.embed_dim, num),
        field!("augment_aerial", c => c.bench.train.augment_aerial, flag),
        field!("prototype_margin_m", c => c.bench.train.prototype_margin_m, num),
        field!("validation_size", c => c.bench.train.validation_size, num),
        field!("checkpoint_every", c => c.bench.train.checkpoint_every, num),
        field!("alpha", c => c.bench.train.loss.alpha, num),
        field!("beta", c => c.bench.train.loss.beta, num),
        field!("lambda", c => c.bench.train.loss.lambda, num),
        field!("neg_exclusion_radius_m", c => c.bench.train.loss.neg_exclusion_radius_m, num),
        field!("batch_exclusion_radius_m", c => c.bench.train.loss.batch_exclusion_radius_m, num),
        field!("frustum_depth_m", c => c.bench.train.loss.frustum_depth_m, num),
        field!("detach_ap_edge", c => c.bench.train.loss.detach_ap_edge, flag),
        field!("renormalize_interp", c => c.bench.train.loss.renormalize_interp, flag),
        field!("edge_ground_aerial", c => c.bench.train.loss.edges.ground_aerial, flag),
        field!("edge_ground_prototype", c => c.bench.train.loss.edges.ground_prototype, flag),
        field!("edge_aerial_prototype", c => c.bench.train.loss.edges.aerial_prototype, flag),
        Field {
            key: "ground_interp",
            get: |c| ground_interp_name(c.bench.train.loss.ground_interp).to_string(),
            set: |c, v| {
                c.bench.train.loss.ground_interp = parse_ground_interp(v)?;
                Ok(())
            },
        },
        Field {
            key: "aerial_interp",
            get: |c| aerial_interp_name(c.bench.train.loss.aerial_interp).to_string(),
            set: |c, v| {
                c.bench.train.loss.aerial_interp = parse_aerial_interp(v)?;
                Ok(())
            },
        },
        field!("calibration_queries", c => c.bench.calibration_queries, num),
        Field {
            key: "ks",
            get: |c| join(&c.bench.ks),
            set: |c, v| {
                c.bench.ks = list(v)?;
                Ok(())
            },
        },
        Field {
            key: "distances_m",
            get: |c| join(&c.bench.distances_m),
            set: |c, v| {
                c.bench.distances_m = list(v)?;
                Ok(())
            },
        },
        Field {
            key: "kappa",
            get: |c| c.kappa.map_or("auto".into(), |k| k.to_string()),
            set: |c, v| {
                c.kappa = if v == "auto" { None } else { Some(num(v)?) };
                Ok(())
            },
        },
        Field {
            key: "out_dir",
            get: |c| c.out_dir.display().to_string(),
            set: |c, v| {
                c.out_dir = PathBuf::from(v);
                Ok(())
            },
        },
    ]
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            bench: BenchmarkConfig::reference(),
            center_deg: (47.0, 8.0),
            out_dir: PathBuf::from("out"),
            kappa: None,
        }
    }
}

impl RunConfig {
    /// Every known key, in the order of the resolved file.
    pub fn keys() -> Vec<&'static str> {
        fields().iter().map(|f| f.key).collect()
    }

    /// Parses configuration text. `seed`, when given, overrides the file.
    pub fn parse(text: &str, seed: Option<u64>) -> Result<Self, CliError> {
        let table = fields();
        let mut entries: Vec<(usize, &Field, &str)> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Config(format!("line {line_no}: expected key = value, got {line:?}")));
            };
            let (key, value) = (key.trim(), value.trim());
            let Some(field) = table.iter().find(|f| f.key == key) else {
                return Err(CliError::Config(format!("line {line_no}: unknown key {key:?}")));
            };
            if let Some((first, _, _)) = entries.iter().find(|e| e.1.key == key) {
                return Err(CliError::Config(format!("line {line_no}: {key} already set on line {first}")));
            }
            entries.push((line_no, field, value));
        }

        let mut config = Self::default();
        let level_of = |key: &str, current: u8| -> Result<u8, CliError> {
            match entries.iter().find(|e| e.1.key == key) {
                Some((line_no, _, v)) => num(v).map_err(|m| CliError::Config(format!("line {line_no}: {key}: {m}"))),
                None => Ok(current),
            }
        };
        let lp = level_of("prototype_level", config.bench.levels.prototype_level())?;
        let la = level_of("aerial_level", config.bench.levels.aerial_level())?;
        config.bench.levels = LevelConfig::new(lp, la).map_err(|e| CliError::Config(e.to_string()))?;
        let structural = |e: &&(usize, &Field, &str)| STRUCTURAL.contains(&e.1.key);
        for (line_no, field, value) in entries.iter().filter(structural) {
            (field.set)(&mut config, value).map_err(|m| CliError::Config(format!("line {line_no}: {}: {m}", field.key)))?;
        }
        config.bench.refresh_derived();
        for (line_no, field, value) in entries.iter().filter(|e| !structural(e)) {
            (field.set)(&mut config, value).map_err(|m| CliError::Config(format!("line {line_no}: {}: {m}", field.key)))?;
        }
        if let Some(s) = seed {
            config.bench = config.bench.clone().with_seed(s);
        }
        config.bench.world.region_center = GeoPoint::from_degrees(config.center_deg.0, config.center_deg.1)
            .map_err(|e| CliError::Config(format!("region center: {e}")))?;
        config
            .bench
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        if config.kappa.is_some_and(|k| !(k >= 0.0 && k.is_finite())) {
            return Err(CliError::Config("kappa must be a nonnegative number or auto".into()));
        }
        Ok(config)
    }

    /// Every setting, one `key = value` line each. Parsing the result gives
    /// back the same configuration.
    pub fn resolved(&self) -> String {
        let mut out = String::from("# Resolved configuration. Every key is listed with its effective value.\n");
        for f in fields() {
            let _ = writeln!(out, "{} = {}", f.key, (f.get)(self));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_reference() {
        let c = RunConfig::parse("", None).unwrap();
        assert_eq!(c.bench, BenchmarkConfig::reference());
    }

    #[test]
    fn resolved_round_trips() {
        let text = "seed = 3\nprototype_level = 11\naerial_level = 13\nsteps = 20\nks = 1,2\nground_interp = frustum_all\nkappa = 1.5\n";
        let c = RunConfig::parse(text, None).unwrap();
        let again = RunConfig::parse(&c.resolved(), None).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.resolved(), again.resolved());
        assert_eq!(c.bench.train.seed, 3);
        assert_eq!(c.kappa, Some(1.5));
    }

    #[test]
    fn derived_defaults_follow_levels_unless_given() {
        let c = RunConfig::parse("prototype_level = 11\n", None).unwrap();
        let r = BenchmarkConfig::reference();
        assert!((c.bench.train.loss.neg_exclusion_radius_m - 2.0 * r.train.loss.neg_exclusion_radius_m).abs() < 1e-6);
        let c = RunConfig::parse("neg_exclusion_radius_m = 5\nprototype_level = 11\n", None).unwrap();
        assert_eq!(c.bench.train.loss.neg_exclusion_radius_m, 5.0);
    }

    #[test]
    fn errors_name_the_line() {
        let e = RunConfig::parse("# comment\n\nsteps = 5\nbogus = 1\n", None).unwrap_err();
        assert!(e.to_string().contains("line 4") && e.to_string().contains("bogus"), "{e}");
        let e = RunConfig::parse("steps = many\n", None).unwrap_err();
        assert!(e.to_string().contains("line 1"), "{e}");
        let e = RunConfig::parse("steps = 5\nsteps = 6\n", None).unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
        let e = RunConfig::parse("no equals sign\n", None).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn seed_flag_overrides_file() {
        let c = RunConfig::parse("seed = 4\n", Some(9)).unwrap();
        assert_eq!((c.bench.seed, c.bench.world.seed, c.bench.train.seed), (9, 9, 9));
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for text in ["batch_size = 0\n", "edge_ground_aerial = false\nedge_ground_prototype = false\nedge_aerial_prototype = false\n", "aerial_level = 11\n", "kappa = -1\n"] {
            assert_eq!(RunConfig::parse(text, None).unwrap_err().exit_code(), 2, "{text}");
        }
    }
}
