pub mod eval;
pub mod generate;
pub mod impact;
pub mod pipeline;
pub mod report;
