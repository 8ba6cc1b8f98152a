//! Run configuration: one JSON file, `//` and `/* */` comments allowed.

use std::io::Read;
use std::path::Path;

use json_comments::StripComments;
use kmarkov::estimator::EstimatorConfig;
use kmarkov::markov::CovariatePoint;
use kmarkov::simulator::SimConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub sim: Option<SimConfig>,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    /// Evaluation points. Omitted means unconditional for plain chains and
    /// `{1.5, 1.7} × {0, 1}` when the simulator draws covariates.
    #[serde(default)]
    pub grid: Option<Vec<CovariatePoint>>,
    /// State count when it cannot be taken from `sim`.
    #[serde(default)]
    pub states: Option<usize>,
    #[serde(default)]
    pub experiment: Option<ExperimentBlock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentBlock {
    pub n_values: Vec<usize>,
    #[serde(default = "one")]
    pub replications: usize,
    #[serde(default)]
    pub seed: Option<u64>,
}

fn one() -> usize {
    1
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut clean = String::new();
        StripComments::new(text.as_bytes())
            .read_to_string(&mut clean)
            .map_err(|e| CliError::Usage(format!("config: {e}")))?;
        serde_json::from_str(&clean).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    /// Reads the config and returns it with the raw bytes it was parsed from.
    pub fn load(path: &Path) -> Result<(Self, Vec<u8>), CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let text =
            String::from_utf8(bytes.clone()).map_err(|_| CliError::Usage(format!("{}: not UTF-8", path.display())))?;
        let cfg = Self::parse(&text).map_err(|e| match e {
            CliError::Usage(m) => CliError::Usage(format!("{}: {m}", path.display())),
            other => other,
        })?;
        Ok((cfg, bytes))
    }

    pub fn grid(&self) -> Vec<CovariatePoint> {
        if let Some(g) = &self.grid {
            return g.clone();
        }
        match &self.sim {
            Some(sim) if sim.with_covariates => {
                let mut g = Vec::new();
                for zc in [1.5, 1.7] {
                    for zd in [0, 1] {
                        g.push(CovariatePoint::new(vec![zc], vec![zd]));
                    }
                }
                g
            }
            _ => vec![CovariatePoint::unconditional()],
        }
    }

    pub fn states(&self) -> Option<usize> {
        self.states.or_else(|| self.sim.as_ref().map(|s| s.states()))
    }
}

/// Parses `--grid`: points separated by `;`, each `ZC[,ZC..][/ZD[,ZD..]]`.
/// A point written `-` is the unconditional point.
pub fn parse_grid(s: &str) -> Result<Vec<CovariatePoint>, String> {
    let mut out = Vec::new();
    for raw in s.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        if raw == "-" {
            out.push(CovariatePoint::unconditional());
            continue;
        }
        let (c, d) = raw.split_once('/').unwrap_or((raw, ""));
        let list = |part: &str| -> Vec<String> {
            part.split(',').map(str::trim).filter(|x| !x.is_empty()).map(String::from).collect()
        };
        let continuous = list(c)
            .iter()
            .map(|x| x.parse::<f64>().map_err(|_| format!("bad continuous value `{x}` in `{raw}`")))
            .collect::<Result<Vec<_>, _>>()?;
        let discrete = list(d)
            .iter()
            .map(|x| x.parse::<u32>().map_err(|_| format!("bad discrete value `{x}` in `{raw}`")))
            .collect::<Result<Vec<_>, _>>()?;
        out.push(CovariatePoint::new(continuous, discrete));
    }
    if out.is_empty() {
        return Err("grid has no points".into());
    }
    Ok(out)
}
