//! Shallow text classification with hyperbolic embeddings.
//!
//! A fastText-style classifier whose word and n-gram embeddings live in the
//! Poincaré ball. Documents are pooled with the Einstein midpoint (computed in
//! the Klein model) and classified by a Möbius linear layer followed by a
//! softmax. Every hyperbolic stage can be swapped for its euclidean
//! counterpart, which recovers the plain fastText network.
//!
//! ```no_run
//! use hypertext::optim::{train, TrainConfig};
//!
//! let out = train("train.txt".as_ref(), &TrainConfig::default()).unwrap();
//! let top = out.classifier.predict_line("stocks rallied after the report", 1).unwrap();
//! println!("{}", out.classifier.vocab.label(top[0].0));
//! ```

pub mod cli;
pub mod error;
pub mod eval;
pub mod hypergeo;
pub mod model;
pub mod optim;
pub mod par;
pub mod textcorpus;

pub use error::{Error, Result};
pub use hypergeo::{BallPoint, Curvature, KleinPoint, TangentGrad};
pub use model::{Architecture, ClassifierKind, Geometry, Model, Pooling, TextClassifier};
pub use optim::{train, TrainConfig};
pub use textcorpus::{CorpusConfig, Document, Vocab};
