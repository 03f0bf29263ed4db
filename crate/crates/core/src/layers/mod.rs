//! Forward and backward passes for every layer family.
//!
//! Backward passes take the parameter values and a parallel slice of
//! gradient slots, accumulate into the slots and return the gradient with
//! respect to the layer input.

mod dense;
mod dropout;
mod head;
mod set;

pub use dense::{
    dense_forward, maxout_forward, stack_backward, stack_forward, Dense, Maxout, MaxoutCache, Unit,
    UnitCache,
};
pub use dropout::DropoutMask;
pub use head::{sigmoid, sigmoid_grad, softmax, softmax_xent, Residual, ResidualCache};
pub use set::{
    embed_set, equivariant_forward, pairwise_forward, pool, pool_backward, pool_forward, Equivariant,
    EquivariantCache, Pairwise, PairwiseCache, PoolCache, PoolMode,
};
