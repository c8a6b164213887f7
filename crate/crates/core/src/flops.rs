//! Instrumented FLOP tally.
//!
//! Every dense kernel in [`crate::linalg`] charges its cost to the category
//! that is current on the calling thread. Adapter forwards switch categories
//! around each stage so the tally can be compared term by term against the
//! closed-form expressions in [`crate::accounting`].
//!
//! Conventions: one multiply-add is 2 FLOPs; a weighted accumulation
//! `acc += g * x` over `d` elements is `d` aggregation FLOPs (the add) plus
//! `d` weighting FLOPs (the scale). Weighting, base projection and the final
//! add of the adapter delta into `Wx` are tracked but are not part of the
//! headline adapter cost.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Category {
    /// Frozen `Wx`.
    Base,
    /// Low-rank expert projections (`A x`, `B z`, `V x`, `M x̂`, `U u`).
    Expert,
    /// Summing expert outputs, expert parameters or core matrices.
    Aggregation,
    /// Elementwise scaling by routing weights or the adapter scale.
    Weighting,
    /// Router logits and instance means.
    Routing,
    /// Adding the adapter delta into `Wx`.
    FinalAdd,
    /// Anything not attributed (backward passes, optimizer, tests).
    Other,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopTally {
    pub base: u64,
    pub expert: u64,
    pub aggregation: u64,
    pub weighting: u64,
    pub routing: u64,
    pub final_add: u64,
    pub other: u64,
}

impl FlopTally {
    /// Expert plus aggregation FLOPs: the quantity the closed-form cost model predicts.
    pub fn adapter(&self) -> u64 {
        self.expert + self.aggregation
    }

    /// Multiply-add count of the adapter path (expert + routing products and
    /// aggregation adds), excluding base, weighting and the final add.
    pub fn adapter_with_routing(&self) -> u64 {
        self.expert + self.aggregation + self.routing
    }

    fn slot(&mut self, cat: Category) -> &mut u64 {
        match cat {
            Category::Base => &mut self.base,
            Category::Expert => &mut self.expert,
            Category::Aggregation => &mut self.aggregation,
            Category::Weighting => &mut self.weighting,
            Category::Routing => &mut self.routing,
            Category::FinalAdd => &mut self.final_add,
            Category::Other => &mut self.other,
        }
    }
}

thread_local! {
    static TALLY: Cell<FlopTally> = Cell::new(FlopTally::default());
    static CURRENT: Cell<Category> = const { Cell::new(Category::Other) };
}

pub(crate) fn charge(flops: u64) {
    let cat = CURRENT.with(Cell::get);
    charge_to(cat, flops);
}

pub(crate) fn charge_to(cat: Category, flops: u64) {
    TALLY.with(|t| {
        let mut tally = t.get();
        *tally.slot(cat) += flops;
        t.set(tally);
    });
}

/// Runs `f` with `cat` as the current category, restoring the previous one afterwards.
pub fn in_category<R>(cat: Category, f: impl FnOnce() -> R) -> R {
    let prev = CURRENT.with(|c| c.replace(cat));
    let out = f();
    CURRENT.with(|c| c.set(prev));
    out
}

/// Runs `f` and returns its result together with the FLOPs it charged on this thread.
pub fn measure<R>(f: impl FnOnce() -> R) -> (R, FlopTally) {
    let saved = TALLY.with(|t| t.replace(FlopTally::default()));
    let out = f();
    let tally = TALLY.with(|t| t.replace(saved));
    let mut merged = saved;
    for (dst, src) in [
        (&mut merged.base, tally.base),
        (&mut merged.expert, tally.expert),
        (&mut merged.aggregation, tally.aggregation),
        (&mut merged.weighting, tally.weighting),
        (&mut merged.routing, tally.routing),
        (&mut merged.final_add, tally.final_add),
        (&mut merged.other, tally.other),
    ] {
        *dst += src;
    }
    TALLY.with(|t| t.set(merged));
    (out, tally)
}
