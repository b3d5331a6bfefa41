//! Differentiable substrate shared by every trained module.

pub mod attention;
pub mod grad_check;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod pool;
pub mod tensor;

pub use attention::{efficient_attention, AttentionBlock};
pub use grad_check::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use layers::{
    dropout, kl_standard_normal, reparameterize, reparameterize_array, Linear, Mlp, Posterior, ResidualMlp,
    ResidualMlpConfig, VariationalHead,
};
pub use optim::{AdamW, AdamWConfig};
pub use pool::{cosine_kl_terms, ClsPooler};
pub use tensor::{ParamSet, Real};
