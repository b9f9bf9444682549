//! Command-line toolkit, recipes and checkpoint files around `sparsekit-core`.

pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod recipe;

pub use checkpoint::Checkpoint;
pub use error::AppError;
pub use recipe::Recipe;
