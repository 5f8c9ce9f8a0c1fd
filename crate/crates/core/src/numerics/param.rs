use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::Tensor;

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(0);

/// Identity of a learnable tensor, used to bind it to a tape exactly once.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(u64);

/// A learnable tensor shared between the model and any number of tapes.
///
/// Clones keep the same id and share storage until one of them is mutated.
#[derive(Clone, Debug)]
pub struct Param {
    id: ParamId,
    value: Arc<Tensor>,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        Self {
            id: ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed)),
            value: Arc::new(value),
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub(crate) fn shared(&self) -> Arc<Tensor> {
        Arc::clone(&self.value)
    }

    /// Mutable access; copies the storage first if a tape still holds it.
    pub fn value_mut(&mut self) -> &mut Tensor {
        Arc::make_mut(&mut self.value)
    }

    pub fn set(&mut self, value: Tensor) {
        self.value = Arc::new(value);
    }
}
