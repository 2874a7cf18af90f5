//! Extendable wheeled inverted pendulum workbench: plant model, tracking task,
//! DDPG and PPO trainers, and a linear MPC baseline.

pub mod checkpoint;
pub mod ddpg;
pub mod dynamics;
pub mod environment;
pub mod mpc;
pub mod neural;
pub mod ppo;
