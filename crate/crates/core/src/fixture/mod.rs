pub mod planted;
pub mod random;
