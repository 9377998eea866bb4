//! Persistent-identifier addressed transient networks: identifiers and
//! their distributed resolution, Area-of-Influence formation, pod
//! forwarding between AoIs, and a deterministic simulator tying them
//! together.
//!
//! Route scores and everything that carries them are generic over the
//! float type; the aliases below pick `f64`, with `F32` variants.

pub mod aoi;
pub mod dpin;
pub mod gateway;
pub mod graph;
pub mod identity;
pub mod pods;
pub mod routing;
pub mod scalar;
pub mod simcore;

pub type RouteScore = routing::RouteScore<f64>;
pub type RouteTable = routing::RouteTable<f64>;
pub type PropagationPolicy = routing::PropagationPolicy<f64>;
pub type GatewayState = gateway::GatewayState<f64>;
pub type Simulation = simcore::Simulation<f64>;

pub type RouteScoreF32 = routing::RouteScore<f32>;
pub type RouteTableF32 = routing::RouteTable<f32>;
pub type PropagationPolicyF32 = routing::PropagationPolicy<f32>;
pub type GatewayStateF32 = gateway::GatewayState<f32>;
pub type SimulationF32 = simcore::Simulation<f32>;
