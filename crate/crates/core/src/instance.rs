//! JSON instance files: plants, network and an optional period.
//!
//! ```json
//! {
//!   "plants": [{"A": [[1.1]], "B": [[1.0]], "K": [[-0.6]]}],
//!   "network": {"capacity": 1, "loss_probability": 0.5},
//!   "period": 2
//! }
//! ```
//!
//! Unknown keys are rejected and matrix shapes are cross-checked.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{matrix_from_rows, matrix_to_rows};
use crate::model::{NetworkConfig, Plant};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlantFile {
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    b: Vec<Vec<f64>>,
    #[serde(rename = "K", default, skip_serializing_if = "Option::is_none")]
    k: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetworkFile {
    capacity: usize,
    loss_probability: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceFile {
    plants: Vec<PlantFile>,
    network: NetworkFile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    period: Option<usize>,
}

/// A validated problem instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub plants: Vec<Plant>,
    pub network: NetworkConfig,
    pub period: Option<usize>,
}

impl Instance {
    pub fn new(plants: Vec<Plant>, network: NetworkConfig, period: Option<usize>) -> Result<Self> {
        network.check_plants(plants.len())?;
        if period == Some(0) {
            return Err(Error::invalid("period must be positive"));
        }
        Ok(Instance {
            plants,
            network,
            period,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: InstanceFile = serde_json::from_str(text)
            .map_err(|e| Error::invalid(format!("malformed instance: {e}")))?;
        let plants = file
            .plants
            .iter()
            .enumerate()
            .map(|(idx, p)| {
                let k = p.k.as_deref().map(matrix_from_rows).transpose();
                matrix_from_rows(&p.a)
                    .and_then(|a| Ok((a, matrix_from_rows(&p.b)?, k?)))
                    .and_then(|(a, b, k)| Plant::new(a, b, k))
                    .map_err(|e| Error::invalid(format!("plant {}: {e}", idx + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        let network = NetworkConfig::new(file.network.capacity, file.network.loss_probability)?;
        Instance::new(plants, network, file.period)
    }

    pub fn to_json(&self) -> String {
        let file = InstanceFile {
            plants: self
                .plants
                .iter()
                .map(|p| PlantFile {
                    a: matrix_to_rows(p.a()),
                    b: matrix_to_rows(p.b()),
                    k: p.k().map(matrix_to_rows),
                })
                .collect(),
            network: NetworkFile {
                capacity: self.network.capacity(),
                loss_probability: self.network.loss_probability(),
            },
            period: self.period,
        };
        serde_json::to_string_pretty(&file).expect("instance serialization cannot fail")
    }

    pub fn n_plants(&self) -> usize {
        self.plants.len()
    }

    pub fn all_have_gains(&self) -> bool {
        self.plants.iter().all(|p| p.k().is_some())
    }
}
