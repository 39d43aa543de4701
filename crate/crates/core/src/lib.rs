pub mod annotations;
pub mod cli;
pub mod embedding;
pub mod gradcheck;
pub mod mi;
pub mod negatives;
pub mod prompting;
pub mod training;
pub mod seeds;
