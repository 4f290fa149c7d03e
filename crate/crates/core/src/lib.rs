pub mod attacks;
pub mod bench;
pub mod datasets;
pub mod gradcore;
pub mod train;
pub mod zoo;
