pub mod basic;
pub mod sparse;
pub mod trajectory;
pub mod triplet;
