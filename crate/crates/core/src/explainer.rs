//! A common interface over explanation methods, used by evaluation and the
//! command-line tools.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::Attention;
use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A batch of images to explain, each paired with the class of interest.
pub struct ExplainBatch<'a> {
    /// Raw crops in `[0,1]`, `[N,3,H,W]`.
    pub raw: &'a Tensor,
    /// The same crops standardized, as fed to the backbone.
    pub standardized: &'a Tensor,
    pub classes: &'a [usize],
    /// Stable image ids, for explainers that need per-image randomness.
    pub ids: &'a [u32],
}

impl ExplainBatch<'_> {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

pub trait Explainer: Sync {
    fn name(&self) -> String;

    /// One `[h,w]` map in `[0,1]` per image of the batch.
    fn explain(&self, backbone: &Backbone, batch: &ExplainBatch<'_>) -> Result<Vec<Tensor>>;
}

/// The trained attention mechanism.
pub struct Ttame<'a>(pub &'a Attention);

impl Explainer for Ttame<'_> {
    fn name(&self) -> String {
        "ttame".into()
    }

    fn explain(&self, backbone: &Backbone, batch: &ExplainBatch<'_>) -> Result<Vec<Tensor>> {
        let out = self.0.explain_batch(backbone, batch.standardized)?;
        out.iter()
            .zip(batch.classes)
            .map(|((_, e), &c)| {
                if c >= e.num_classes() {
                    return Err(Error::InvalidArgument(format!("class {c} out of range")));
                }
                Ok(e.class(c))
            })
            .collect()
    }
}

/// Independent uniform values per pixel; a per-image stream keyed by the
/// image id makes maps independent of batching.
pub struct RandomMaps {
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Explainer for RandomMaps {
    fn name(&self) -> String {
        "random".into()
    }

    fn explain(&self, _backbone: &Backbone, batch: &ExplainBatch<'_>) -> Result<Vec<Tensor>> {
        Ok(batch
            .ids
            .iter()
            .map(|&id| {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(id as u64);
                Tensor::from_fn(vec![self.height, self.width], |_| rng.random::<f64>())
            })
            .collect())
    }
}

/// The same constant map for every image.
pub struct ConstantMaps {
    pub height: usize,
    pub width: usize,
    pub value: f64,
}

impl Explainer for ConstantMaps {
    fn name(&self) -> String {
        "constant".into()
    }

    fn explain(&self, _backbone: &Backbone, batch: &ExplainBatch<'_>) -> Result<Vec<Tensor>> {
        Ok(vec![Tensor::full([self.height, self.width], self.value); batch.len()])
    }
}
