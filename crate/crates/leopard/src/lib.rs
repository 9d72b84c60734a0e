//! Reward learning from preferences and positive/negative ranked
//! demonstrations.
//!
//! Human feedback is encoded as strict partial orderings over observed
//! trajectory fragments and scored by Boltzmann-rational choice
//! probabilities (the RRPO likelihood). The LEOPARD loop alternates
//! between sampling synthetic preferences, fitting a reward model to all
//! accumulated feedback, and training a tabular Q-learning agent on the
//! learnt reward. Alternative demonstration likelihoods (Bradley-Terry,
//! Sum-of-Choices, Choose-Best-Average) are included for comparison, along
//! with a verification harness for the loss-to-reward-gap guarantees.

pub mod agent;
pub mod baselines;
pub mod driver;
pub mod env;
pub mod oracle;
pub mod ordering;
pub mod reward;
pub mod rrpo;
pub mod trajectory;
