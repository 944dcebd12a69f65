pub mod attack_demo;
pub mod eval;
pub mod gen_data;
pub mod report;
pub mod train;
