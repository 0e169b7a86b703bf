use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::models::fan_in_param;
use crate::ssl_loss::{EmbeddingBatch, DEFAULT_EPSILON};
use crate::tensor::Tensor;

/// Three bias-free linear layers `R → 4R → 4R → 4R`; the first two are
/// followed by feature standardization and ReLU.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectorConfig {
    pub input_dim: usize,
    pub epsilon: f64,
}

impl ProjectorConfig {
    pub fn for_representation(input_dim: usize) -> Self {
        Self {
            input_dim,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn output_dim(&self) -> usize {
        4 * self.input_dim
    }
}

#[derive(Clone, Debug)]
pub struct Projector {
    config: ProjectorConfig,
    layers: [ParamId; 3],
}

impl Projector {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, config: &ProjectorConfig, rng: &mut R) -> Result<Self> {
        if config.input_dim == 0 {
            return Err(Error::Config("projector input dimension must be positive".into()));
        }
        let (r, d) = (config.input_dim, config.output_dim());
        let l0 = fan_in_param(store, "projector.linear0".into(), &[r, d], r, 2f64.sqrt(), rng)?;
        let l1 = fan_in_param(store, "projector.linear1".into(), &[d, d], d, 2f64.sqrt(), rng)?;
        let l2 = fan_in_param(store, "projector.linear2".into(), &[d, d], d, 1.0, rng)?;
        Ok(Self {
            config: config.clone(),
            layers: [l0, l1, l2],
        })
    }

    pub fn config(&self) -> &ProjectorConfig {
        &self.config
    }

    pub fn layers(&self) -> [ParamId; 3] {
        self.layers
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, reps: Var) -> Result<Var> {
        let (b, r) = tape.value(reps).dims2()?;
        if r != self.config.input_dim {
            return Err(Error::dim(format!(
                "projector expects {} features, got {r}",
                self.config.input_dim
            )));
        }
        if b < 2 {
            return Err(Error::BatchSize { required: 2, actual: b });
        }
        let mut h = reps;
        for (i, &layer) in self.layers.iter().enumerate() {
            let w = tape.param(store, layer)?;
            h = tape.matmul(h, w)?;
            if i < 2 {
                h = tape.batchnorm_feature(h, self.config.epsilon)?;
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }
}

/// Embeddings `B×4R` of a batch of representations.
pub fn project(projector: &Projector, store: &ParamStore, reps: &Tensor, domain_id: usize) -> Result<EmbeddingBatch> {
    let mut tape = Tape::new();
    let x = tape.input(reps.clone())?;
    let z = projector.forward(&mut tape, store, x)?;
    EmbeddingBatch::new(tape.value(z).clone(), domain_id)
}
