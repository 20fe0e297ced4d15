//! Task-driven diffusion policy with affordance-guided contact planning,
//! trained on toy 2-D articulated objects.

pub mod contact_planner;
pub mod diffusion_policy;
pub mod ltl;
pub mod nn;
pub mod perception;
pub mod task_encoder;
pub mod tl_mdp;
pub mod trainer;
pub mod toy_env;
