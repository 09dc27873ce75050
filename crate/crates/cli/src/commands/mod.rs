pub mod eval;
pub mod export;
pub mod generate;
pub mod sweep;
pub mod train;
