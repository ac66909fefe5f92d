pub mod adapters;
pub mod bandit;
pub mod datagen;
pub mod backends;
pub mod diversity;
pub mod numerics;
pub mod subspace;
pub mod toyenv;
pub mod unlearn;
