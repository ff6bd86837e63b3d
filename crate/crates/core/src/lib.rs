//! Multi-class classification as distribution transport.
//!
//! Class labels are mapped to mutually orthogonal sinusoidal codewords
//! ([`taxonomy`]). A target estimator ([`estimator`]) is trained to recover the
//! codeword of a sample from a point on a Gaussian probability path that runs
//! from the codeword (`t = 0`) to the sample's feature vector (`t = 1`)
//! ([`schedules`], [`training`]). At inference the feature vector is carried back
//! to codeword space by Euler integration of the estimator-induced vector field
//! ([`sampler`]), and the class is the codeword with the highest cosine
//! similarity.
//!
//! ```
//! use tmclass::taxonomy::{ClassTaxonomy, TaxonomyCodebook};
//!
//! let taxonomy = ClassTaxonomy::new(["neutral", "happy", "sad", "angry"]).unwrap();
//! let codebook = TaxonomyCodebook::build(&taxonomy, 64).unwrap();
//! let (predicted, scores) = codebook.classify(codebook.codeword(2).view()).unwrap();
//! assert_eq!(predicted, 2);
//! assert!((scores[2] - 1.0).abs() < 1e-12);
//! ```

pub mod checkpoint;
pub mod config;
pub mod data;
mod error;
pub mod estimator;
pub mod evaluation;
pub mod sampler;
pub mod schedules;
pub mod taxonomy;
pub mod training;

pub use error::{Error, ErrorKind, Result};
