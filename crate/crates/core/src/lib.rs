pub mod dataset;
pub mod error;
pub mod eval;
pub mod estep;
pub mod fast;
pub mod gem;
pub mod io;
pub mod metrics;
pub mod model;
pub mod mstep;
pub mod numeric;
pub mod objective;
pub mod optim;
pub mod priors;
pub mod sigmoid;
pub mod synthetic;
