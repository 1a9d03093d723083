//! Camera pose and ego-motion estimation from two-frame feature
//! correspondences and a digital terrain map, with analytic first-order
//! covariance of the estimate and a Monte-Carlo simulation harness.

pub mod asc;
pub mod config;
pub mod constraint;
pub mod covariance;
pub mod dtm;
pub mod geom;
pub mod output;
pub mod sim;
pub mod solver;
