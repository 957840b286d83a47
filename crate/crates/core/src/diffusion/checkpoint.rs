//! Plain-text policy checkpoints.
//!
//! ```text
//! prdp-checkpoint 1
//! seed 42
//! state_dim 2
//! prompt_count 4
//! hidden 64 64
//! beta 0.01 0.0755 ...
//! alpha_bar 0.99 0.915 ...
//! sigma 0.094 0.094 ...
//! tensor layer0.bias 64
//! 0 0 0 ...
//! tensor layer0.weight 7 64
//! 0.12 -0.3 ...
//! ```
//!
//! Every `tensor` header names the tensor and its shape; the following line
//! holds the row-major values. Floats use Rust's shortest round-trip form,
//! so save → load is exact.

use std::fmt::Write as _;
use std::path::Path;

use crate::autodiff::{Bindings, Tensor};
use crate::error::{Error, Result};

use super::{DenoisingPolicy, NoiseSchedule, PolicyArch, PolicyNet};

const MAGIC: &str = "prdp-checkpoint 1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub policy: PolicyNet,
    pub schedule: NoiseSchedule,
    pub seed: u64,
}

fn join(values: &[f64]) -> String {
    let mut s = String::new();
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        write!(s, "{v}").expect("write to string");
    }
    s
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let arch = self.policy.arch();
        let mut out = String::new();
        let hidden: Vec<String> = arch.hidden.iter().map(|h| h.to_string()).collect();
        writeln!(out, "{MAGIC}").unwrap();
        writeln!(out, "seed {}", self.seed).unwrap();
        writeln!(out, "state_dim {}", arch.state_dim).unwrap();
        writeln!(out, "prompt_count {}", arch.prompt_count).unwrap();
        writeln!(out, "hidden {}", hidden.join(" ")).unwrap();
        writeln!(out, "beta {}", join(self.schedule.betas())).unwrap();
        writeln!(out, "alpha_bar {}", join(self.schedule.alpha_bars())).unwrap();
        writeln!(out, "sigma {}", join(self.schedule.sigmas())).unwrap();
        for (name, t) in self.policy.params() {
            let shape: Vec<String> = t.shape().iter().map(|s| s.to_string()).collect();
            writeln!(out, "tensor {name} {}", shape.join(" ")).unwrap();
            writeln!(out, "{}", join(t.data())).unwrap();
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|detail| Error::Format {
            path: path.to_path_buf(),
            detail,
        })
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next().map(str::trim) != Some(MAGIC) {
            return Err("missing checkpoint header".into());
        }
        let mut field = |key: &str| -> std::result::Result<Vec<String>, String> {
            let line = lines.next().ok_or(format!("missing `{key}`"))?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(key) {
                return Err(format!("expected `{key}`, found `{line}`"));
            }
            Ok(parts.map(str::to_string).collect())
        };
        let num = |v: &[String]| -> std::result::Result<usize, String> {
            v.first()
                .ok_or("missing value".to_string())?
                .parse()
                .map_err(|e| format!("{e}"))
        };
        let floats = |v: &[String]| -> std::result::Result<Vec<f64>, String> {
            v.iter()
                .map(|s| s.parse::<f64>().map_err(|e| format!("{e}")))
                .collect()
        };
        let seed: u64 = field("seed")?
            .first()
            .ok_or("missing seed")?
            .parse()
            .map_err(|e| format!("{e}"))?;
        let state_dim = num(&field("state_dim")?)?;
        let prompt_count = num(&field("prompt_count")?)?;
        let hidden = field("hidden")?
            .iter()
            .map(|s| s.parse::<usize>().map_err(|e| format!("{e}")))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let betas = floats(&field("beta")?)?;
        let alpha_bar = floats(&field("alpha_bar")?)?;
        let sigma = floats(&field("sigma")?)?;
        let schedule =
            NoiseSchedule::from_stored(betas, alpha_bar, sigma).map_err(|e| e.to_string())?;

        let mut params = Bindings::new();
        while let Some(header) = lines.next() {
            let mut parts = header.split_whitespace();
            if parts.next() != Some("tensor") {
                return Err(format!("expected tensor header, found `{header}`"));
            }
            let name = parts.next().ok_or("tensor without a name")?.to_string();
            let shape = parts
                .map(|s| s.parse::<usize>().map_err(|e| format!("{e}")))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let data = floats(
                &lines
                    .next()
                    .ok_or(format!("tensor `{name}` has no values"))?
                    .split_whitespace()
                    .map(str::to_string)
                    .collect::<Vec<_>>(),
            )?;
            let t = Tensor::new(shape, data).map_err(|e| format!("tensor `{name}`: {e}"))?;
            params.insert(name, t);
        }
        let arch = PolicyArch {
            state_dim,
            prompt_count,
            hidden,
        };
        let policy = PolicyNet::from_params(arch, params).map_err(|e| e.to_string())?;
        Ok(Self {
            policy,
            schedule,
            seed,
        })
    }
}
