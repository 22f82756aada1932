//! Whole-image classifier backends the search queries as a black box.

mod oracle;
mod pretrained;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::Region;
use crate::imaging::{blacken, Image};
use crate::scalar::Scalar;

pub use oracle::{oracle_response, OracleClassifier, OracleParams};
pub use pretrained::{
    load_pretrained, Layer, ModelMetadata, NetworkFile, PretrainedClassifier, MODEL_FORMAT,
};

/// Tolerance on the probability mass of a response.
pub const MASS_TOLERANCE: f64 = 1e-6;

/// Per-class probabilities returned by a backend.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseVector<T> {
    probs: Vec<T>,
    labels: Option<Arc<[String]>>,
}

impl<T: Scalar> ResponseVector<T> {
    /// Checks every entry lies in `[0, 1]` and that the mass sums to one.
    pub fn new(probs: Vec<T>, labels: Option<Arc<[String]>>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Classifier("empty response".into()));
        }
        if let Some(labels) = &labels {
            if labels.len() != probs.len() {
                return Err(Error::Classifier(format!(
                    "{} labels for {} probabilities",
                    labels.len(),
                    probs.len()
                )));
            }
        }
        if let Some(p) = probs.iter().find(|p| !(**p >= T::zero() && **p <= T::one())) {
            return Err(Error::Classifier(format!("probability {p} outside [0, 1]")));
        }
        let mass: f64 = probs.iter().map(|p| p.to_f64_lossy()).sum();
        if (mass - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::Classifier(format!("probabilities sum to {mass}")));
        }
        Ok(Self { probs, labels })
    }

    #[inline]
    pub fn probs(&self) -> &[T] {
        &self.probs
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// A fixed, deterministic image classifier.
///
/// `classify` accepts images of any size; backends that need a particular
/// input resolution resample internally. Identical input bits must give
/// identical output bits.
pub trait Classifier<T: Scalar>: Sync {
    /// Input resolution `(width, height)` crops are resampled to.
    fn input_dims(&self) -> (u32, u32);

    /// Length of every response vector.
    fn class_count(&self) -> usize;

    fn labels(&self) -> Option<&[String]> {
        None
    }

    fn classify(&self, img: &Image<T>) -> Result<ResponseVector<T>>;

    /// `false` when calls must not overlap; the engine then scores serially.
    fn concurrent(&self) -> bool {
        true
    }

    fn classify_batch(&self, images: &[Image<T>]) -> Result<Vec<ResponseVector<T>>> {
        images
            .iter()
            .enumerate()
            .map(|(index, img)| {
                self.classify(img)
                    .map_err(|e| Error::Batch { index, source: Box::new(e) })
            })
            .collect()
    }

    /// Responses to `img` with each of `regions` blackened in turn. Must match
    /// `classify(&blacken(img, r))` bit for bit; backends that can share work
    /// across the regions override it.
    fn classify_blackened_batch(&self, img: &Image<T>, regions: &[Region]) -> Result<Vec<ResponseVector<T>>> {
        regions
            .iter()
            .enumerate()
            .map(|(index, r)| {
                self.classify(&blacken(img, r))
                    .map_err(|e| Error::Batch { index, source: Box::new(e) })
            })
            .collect()
    }
}

impl<T: Scalar, C: Classifier<T> + ?Sized + Send> Classifier<T> for Box<C> {
    fn input_dims(&self) -> (u32, u32) {
        (**self).input_dims()
    }
    fn class_count(&self) -> usize {
        (**self).class_count()
    }
    fn labels(&self) -> Option<&[String]> {
        (**self).labels()
    }
    fn classify(&self, img: &Image<T>) -> Result<ResponseVector<T>> {
        (**self).classify(img)
    }
    fn concurrent(&self) -> bool {
        (**self).concurrent()
    }
    fn classify_batch(&self, images: &[Image<T>]) -> Result<Vec<ResponseVector<T>>> {
        (**self).classify_batch(images)
    }
    fn classify_blackened_batch(&self, img: &Image<T>, regions: &[Region]) -> Result<Vec<ResponseVector<T>>> {
        (**self).classify_blackened_batch(img, regions)
    }
}

/// Runs a non-empty batch; output `i` is the response to `images[i]`.
pub fn classify_batch<T: Scalar, C: Classifier<T> + ?Sized>(
    classifier: &C,
    images: &[Image<T>],
) -> Result<Vec<ResponseVector<T>>> {
    if images.is_empty() {
        return Err(Error::Classifier("empty batch".into()));
    }
    classifier.classify_batch(images)
}
