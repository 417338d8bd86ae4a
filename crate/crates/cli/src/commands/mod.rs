pub mod flow;
pub mod gradcheck;
pub mod lm;
pub mod pose;
