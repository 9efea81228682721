//! Counterfactual generative modeling lab.

pub mod estimators;
pub mod evaluation;
pub mod models;
pub mod objectives;
pub mod scm;
pub mod tensor;
pub mod training;
