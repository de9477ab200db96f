//! Federated learning over relational graphs.
//!
//! Clients each hold a private subgraph and train an RGCN whose relation
//! weights are built from a small set of shared basis matrices. Only those
//! bases travel to the server. On top of FedAVG and FedProx the crate
//! implements FedAlign: an entropic optimal-transport term that pulls each
//! client's bases toward its peers', optionally combined with a penalty on
//! the norm of the loss gradient with respect to the node embeddings.

pub mod numkernel;
pub mod relgraph;
pub mod synthetic;
pub mod fedsplit;
pub mod ot;
pub mod rgcn;
pub mod fedengine;
pub mod experiment;
