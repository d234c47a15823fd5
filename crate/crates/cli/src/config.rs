//! Experiment configuration: JSON in, typed parameters out, with every
//! validation problem reported against its path in the document.

use std::fmt;

use folirec_core::connection::Generator;
use folirec_core::imputer::DatasetKind;
use folirec_core::scene::ObjectKind;
use serde::Serialize;
use serde_json::{Map, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Subcommand {
    Recon,
    Holonomy,
    AlgebraCheck,
    Toric,
    Impute,
    Radon,
}

impl Subcommand {
    pub const ALL: [Subcommand; 6] = [
        Subcommand::Recon,
        Subcommand::Holonomy,
        Subcommand::AlgebraCheck,
        Subcommand::Toric,
        Subcommand::Impute,
        Subcommand::Radon,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Subcommand::Recon => "recon",
            Subcommand::Holonomy => "holonomy",
            Subcommand::AlgebraCheck => "algebra-check",
            Subcommand::Toric => "toric",
            Subcommand::Impute => "impute",
            Subcommand::Radon => "radon",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Subcommand::ALL.into_iter().find(|c| c.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PipelineParams {
    /// Frame grid nodes per axis on the unit cube; `h = 1 / (resolution - 1)`.
    pub resolution: usize,
    pub steps: usize,
    pub flow_length: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReconParams {
    pub object: ObjectKind,
    pub n: usize,
    pub tilts: [f64; 2],
    pub noise_sigma: f64,
    pub pipeline: Option<PipelineParams>,
}

#[derive(Debug, Clone, Serialize)]
pub struct HolonomyParams {
    pub generator: Generator,
    pub k: usize,
    pub resolution: usize,
    pub lo: f64,
    pub hi: f64,
    /// Generator coefficients; drawn uniformly from `[-scale, scale]` with
    /// the run seed when absent.
    pub coefficients: Option<Vec<f64>>,
    pub scale: f64,
    pub corner: [f64; 2],
    pub sides: [f64; 2],
    pub steps_per_unit: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// `(A, -A^T)`.
    DualPair,
    /// `(A, A)`.
    Mismatched,
    Flat,
}

#[derive(Debug, Clone, Serialize)]
pub struct AlgebraParams {
    pub pairing: Pairing,
    pub k: usize,
    pub resolution: usize,
    pub scale: f64,
    pub base_point: [f64; 2],
    pub steps_per_unit: usize,
    pub triples: usize,
    /// Size of a planted curvature-duality defect added to the second field.
    pub defect: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ToricParams {
    pub group: String,
    pub lambda: f64,
    pub constrained_lambda: f64,
    pub beads: usize,
    pub noise_sigma: f64,
    pub draws: usize,
    pub tilts: [f64; 2],
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Generator { kind: DatasetKind, n: usize, d: usize, noise: f64 },
    File { path: String },
}

#[derive(Debug, Clone, Serialize)]
pub struct ImputeParams {
    pub data: DataSource,
    pub mask: String,
    pub lambda: f64,
    pub paths: usize,
    pub iterations: usize,
    pub sample_index: usize,
    pub cells: usize,
    pub degree: u32,
}

#[derive(Debug, Clone, Serialize)]
pub struct RadonParams {
    pub particles: usize,
    pub spacing: f64,
    pub angles: Vec<f64>,
    pub slab_width: f64,
}

#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
pub enum Params {
    Recon(ReconParams),
    Holonomy(HolonomyParams),
    AlgebraCheck(AlgebraParams),
    Toric(ToricParams),
    Impute(ImputeParams),
    Radon(RadonParams),
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentConfig {
    pub subcommand: Subcommand,
    pub seed: u64,
    pub params: Params,
    pub out_path: Option<String>,
}

impl ExperimentConfig {
    /// Resolved configuration, defaults included.
    pub fn echo(&self) -> Value {
        serde_json::to_value(self).expect("config serialises")
    }
}

/// Cursor over one JSON object. Keys are consumed as they are read; whatever
/// is left at [`Fields::finish`] is reported as unknown.
struct Fields<'e> {
    path: String,
    map: Map<String, Value>,
    errors: &'e mut Vec<ConfigError>,
}

impl<'e> Fields<'e> {
    fn new(path: &str, value: Option<Value>, errors: &'e mut Vec<ConfigError>) -> Self {
        let map = match value {
            None | Some(Value::Null) => Map::new(),
            Some(Value::Object(m)) => m,
            Some(_) => {
                errors.push(ConfigError {
                    path: path.to_string(),
                    message: "expected an object".into(),
                });
                Map::new()
            }
        };
        Fields {
            path: path.to_string(),
            map,
            errors,
        }
    }

    fn key_path(&self, key: &str) -> String {
        if self.path.is_empty() {
            key.to_string()
        } else {
            format!("{}.{key}", self.path)
        }
    }

    fn fail(&mut self, key: &str, message: impl Into<String>) {
        let path = self.key_path(key);
        self.errors.push(ConfigError {
            path,
            message: message.into(),
        });
    }

    fn take(&mut self, key: &str) -> Option<Value> {
        self.map.remove(key).filter(|v| !v.is_null())
    }

    fn child(&mut self, key: &str) -> Fields<'_> {
        let v = self.take(key);
        let path = self.key_path(key);
        Fields::new(&path, v, self.errors)
    }

    fn has(&self, key: &str) -> bool {
        self.map.get(key).is_some_and(|v| !v.is_null())
    }

    fn f64(&mut self, key: &str, default: Option<f64>, check: impl Fn(f64) -> Option<&'static str>) -> f64 {
        match self.take(key) {
            None => default.unwrap_or_else(|| {
                self.fail(key, "missing required key");
                f64::NAN
            }),
            Some(v) => match v.as_f64() {
                Some(x) if !x.is_finite() => {
                    self.fail(key, "must be finite");
                    f64::NAN
                }
                Some(x) => {
                    if let Some(msg) = check(x) {
                        self.fail(key, format!("{msg} (got {x})"));
                    }
                    x
                }
                None => {
                    self.fail(key, format!("expected a number, got {v}"));
                    f64::NAN
                }
            },
        }
    }

    fn count(&mut self, key: &str, default: Option<usize>, min: usize) -> usize {
        match self.take(key) {
            None => default.unwrap_or_else(|| {
                self.fail(key, "missing required key");
                0
            }),
            Some(v) => match (v.as_u64(), v.as_i64()) {
                (Some(x), _) if (x as usize) >= min => x as usize,
                (Some(x), _) => {
                    self.fail(key, format!("must be at least {min} (got {x})"));
                    0
                }
                (None, Some(x)) => {
                    self.fail(key, format!("must be a non-negative integer at least {min} (got {x})"));
                    0
                }
                _ => {
                    self.fail(key, format!("expected an integer, got {v}"));
                    0
                }
            },
        }
    }

    fn string(&mut self, key: &str, default: Option<&str>) -> String {
        match self.take(key) {
            None => default.map(str::to_string).unwrap_or_else(|| {
                self.fail(key, "missing required key");
                String::new()
            }),
            Some(Value::String(s)) => s,
            Some(v) => {
                self.fail(key, format!("expected a string, got {v}"));
                String::new()
            }
        }
    }

    fn list(&mut self, key: &str, default: Option<Vec<f64>>, len: Option<usize>) -> Vec<f64> {
        let Some(v) = self.take(key) else {
            return default.unwrap_or_else(|| {
                self.fail(key, "missing required key");
                Vec::new()
            });
        };
        let Some(items) = v.as_array() else {
            self.fail(key, format!("expected an array of numbers, got {v}"));
            return Vec::new();
        };
        let nums: Option<Vec<f64>> = items.iter().map(Value::as_f64).collect();
        match nums {
            None => {
                self.fail(key, "expected an array of numbers");
                Vec::new()
            }
            Some(n) if n.iter().any(|x| !x.is_finite()) => {
                self.fail(key, "entries must be finite");
                n
            }
            Some(n) => {
                if let Some(l) = len {
                    if n.len() != l {
                        self.fail(key, format!("expected {l} entries, got {}", n.len()));
                    }
                }
                n
            }
        }
    }

    fn pair(&mut self, key: &str, default: [f64; 2]) -> [f64; 2] {
        let v = self.list(key, Some(default.to_vec()), Some(2));
        if v.len() == 2 { [v[0], v[1]] } else { default }
    }

    fn choice<T: Copy>(&mut self, key: &str, default: T, options: &[(&str, T)]) -> T {
        match self.take(key) {
            None => default,
            Some(Value::String(s)) => match options.iter().find(|(n, _)| *n == s) {
                Some((_, t)) => *t,
                None => {
                    let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
                    self.fail(key, format!("unknown value {s:?}; expected one of {names:?}"));
                    default
                }
            },
            Some(v) => {
                self.fail(key, format!("expected a string, got {v}"));
                default
            }
        }
    }

    fn finish(self) {
        for key in self.map.keys() {
            let path = if self.path.is_empty() {
                key.clone()
            } else {
                format!("{}.{key}", self.path)
            };
            self.errors.push(ConfigError {
                path,
                message: "unknown key".into(),
            });
        }
    }
}

fn positive(x: f64) -> Option<&'static str> {
    (x <= 0.0).then_some("must be positive")
}

fn non_negative(x: f64) -> Option<&'static str> {
    (x < 0.0).then_some("must be non-negative")
}

fn any(_: f64) -> Option<&'static str> {
    None
}

/// Parses and validates a JSON config. The subcommand comes from the command
/// line, from a top-level `"subcommand"` key, or both (which must agree).
/// All problems are collected, not just the first.
pub fn validate_config(cli_subcommand: Option<Subcommand>, raw: &str) -> Result<ExperimentConfig, Vec<ConfigError>> {
    let value: Value = serde_json::from_str(raw).map_err(|e| {
        vec![ConfigError {
            path: "<document>".into(),
            message: format!("invalid JSON: {e}"),
        }]
    })?;
    let mut errors = Vec::new();
    let mut top = Fields::new("", Some(value), &mut errors);
    let declared = top.has("subcommand").then(|| top.string("subcommand", None));
    let subcommand = match (cli_subcommand, declared.as_deref()) {
        (Some(c), None) => Some(c),
        (c, Some(name)) => match (c, Subcommand::parse(name)) {
            (_, None) => {
                top.fail("subcommand", format!("unknown subcommand {name:?}"));
                None
            }
            (Some(c), Some(d)) if c != d => {
                top.fail("subcommand", format!("config says {name:?} but {:?} was requested", c.name()));
                None
            }
            (_, d) => d,
        },
        (None, None) => {
            top.fail("subcommand", "missing required key");
            None
        }
    };
    let seed = match top.take("seed") {
        None => 0,
        Some(v) => v.as_u64().unwrap_or_else(|| {
            top.fail("seed", format!("expected a non-negative integer, got {v}"));
            0
        }),
    };
    let out_path = top.has("out_path").then(|| top.string("out_path", None));
    let params = {
        let mut p = top.child("params");
        let params = subcommand.map(|c| parse_params(c, &mut p));
        p.finish();
        params
    };
    top.finish();
    match (subcommand, params) {
        (Some(subcommand), Some(params)) if errors.is_empty() => Ok(ExperimentConfig {
            subcommand,
            seed,
            params,
            out_path,
        }),
        _ => Err(errors),
    }
}

fn parse_params(c: Subcommand, p: &mut Fields<'_>) -> Params {
    match c {
        Subcommand::Recon => {
            let object = p.choice(
                "object",
                ObjectKind::RandomCloud,
                &[
                    ("random_cloud", ObjectKind::RandomCloud),
                    ("helix", ObjectKind::Helix),
                    ("symmetric_capsid", ObjectKind::SymmetricCapsid),
                ],
            );
            let n = p.count("n", Some(100), 1);
            let tilts = p.pair("tilts", [-0.5, 0.8]);
            if (tilts[0] - tilts[1]).abs() < 1e-9 {
                p.fail("tilts", "the two tilts must differ");
            }
            let noise_sigma = p.f64("noise_sigma", Some(0.0), non_negative);
            let pipeline = if p.has("pipeline") {
                let mut q = p.child("pipeline");
                let pp = PipelineParams {
                    resolution: q.count("resolution", Some(65), 3),
                    steps: q.count("steps", Some(8), 1),
                    flow_length: q.f64("flow_length", Some(0.15), positive),
                };
                q.finish();
                Some(pp)
            } else {
                None
            };
            Params::Recon(ReconParams {
                object,
                n,
                tilts,
                noise_sigma,
                pipeline,
            })
        }
        Subcommand::Holonomy => {
            let generator = p.choice(
                "generator",
                Generator::Polynomial,
                &[
                    ("flat", Generator::Flat),
                    ("constant", Generator::Constant),
                    ("polynomial", Generator::Polynomial),
                    ("dual_pair", Generator::DualPair),
                ],
            );
            let k = p.count("k", Some(2), 1);
            let resolution = p.count("resolution", Some(65), 2);
            let lo = p.f64("lo", Some(-1.0), any);
            let hi = p.f64("hi", Some(1.0), any);
            if hi.partial_cmp(&lo) != Some(std::cmp::Ordering::Greater) {
                p.fail("hi", "must exceed lo");
            }
            let coefficients = p.has("coefficients").then(|| p.list("coefficients", None, None));
            let scale = p.f64("scale", Some(0.5), non_negative);
            let corner = p.pair("corner", [-0.5, -0.5]);
            let sides = p.pair("sides", [1.0, 1.0]);
            let steps_per_unit = p.count("steps_per_unit", Some(64), 1);
            Params::Holonomy(HolonomyParams {
                generator,
                k,
                resolution,
                lo,
                hi,
                coefficients,
                scale,
                corner,
                sides,
                steps_per_unit,
            })
        }
        Subcommand::AlgebraCheck => Params::AlgebraCheck(AlgebraParams {
            pairing: p.choice(
                "pairing",
                Pairing::DualPair,
                &[
                    ("dual_pair", Pairing::DualPair),
                    ("mismatched", Pairing::Mismatched),
                    ("flat", Pairing::Flat),
                ],
            ),
            k: p.count("k", Some(2), 1),
            resolution: p.count("resolution", Some(33), 3),
            scale: p.f64("scale", Some(0.5), non_negative),
            base_point: p.pair("base_point", [-0.5, -0.5]),
            steps_per_unit: p.count("steps_per_unit", Some(32), 1),
            triples: p.count("triples", Some(100), 1),
            defect: p.f64("defect", Some(0.0), non_negative),
            tolerance: p.f64("tolerance", Some(1e-6), positive),
        }),
        Subcommand::Toric => Params::Toric(ToricParams {
            group: p.string("group", Some("cyclic:5:z")),
            lambda: p.f64("lambda", Some(1.0), non_negative),
            constrained_lambda: p.f64("constrained_lambda", Some(1e9), positive),
            beads: p.count("beads", Some(20), 1),
            noise_sigma: p.f64("noise_sigma", Some(0.05), non_negative),
            draws: p.count("draws", Some(100), 1),
            tilts: p.pair("tilts", [-0.5, 0.8]),
        }),
        Subcommand::Impute => {
            let data = {
                let mut d = p.child("data");
                let src = if d.has("file") {
                    DataSource::File {
                        path: d.string("file", None),
                    }
                } else {
                    DataSource::Generator {
                        kind: d.choice(
                            "generator",
                            DatasetKind::CurvedSurface,
                            &[("plane", DatasetKind::Plane), ("curved_surface", DatasetKind::CurvedSurface)],
                        ),
                        n: d.count("n", Some(150), 10),
                        d: d.count("d", Some(5), 3),
                        noise: d.f64("noise", Some(0.0), non_negative),
                    }
                };
                d.finish();
                src
            };
            let mask = p.string("mask", None);
            if !mask.is_empty() && (!mask.chars().all(|c| c == '0' || c == '1') || !mask.contains('0') || !mask.contains('1')) {
                p.fail("mask", "must be a bitstring with at least one 0 and one 1");
            }
            Params::Impute(ImputeParams {
                data,
                mask,
                lambda: p.f64("lambda", None, non_negative),
                paths: p.count("paths", Some(8), 1),
                iterations: p.count("iterations", Some(30), 1),
                sample_index: p.count("sample_index", Some(0), 0),
                cells: p.count("cells", Some(4), 1),
                degree: p.count("degree", Some(2), 0).min(u32::MAX as usize) as u32,
            })
        }
        Subcommand::Radon => {
            let particles = p.count("particles", Some(8), 1);
            let spacing = p.f64("spacing", Some(1.0), positive);
            let angles = p.list(
                "angles",
                Some(vec![std::f64::consts::FRAC_PI_6, -std::f64::consts::FRAC_PI_6]),
                None,
            );
            if angles.is_empty() && p.errors.iter().all(|e| !e.path.ends_with("angles")) {
                p.fail("angles", "needs at least one angle");
            }
            let slab_width = p.f64("slab_width", Some(1.0), positive);
            Params::Radon(RadonParams {
                particles,
                spacing,
                angles,
                slab_width,
            })
        }
    }
}
