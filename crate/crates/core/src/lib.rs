pub mod data;
pub mod error;
pub mod fit;
pub mod io;
pub mod linalg;
pub mod lmm;
pub mod qif;
pub mod sim;
pub mod spline;
pub mod theta;
pub mod optim;
pub mod select;
pub mod stats;
