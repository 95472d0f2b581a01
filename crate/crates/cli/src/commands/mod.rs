pub mod bench;
pub mod gen_data;
pub mod reconstruct;
pub mod train;
pub mod viz;
