use std::ops::Range;

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use serde::{Deserialize, Serialize};

/// Location of one parameter tensor inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn matrix<'a>(&self, theta: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.rows, self.cols), &theta[self.range()]).expect("slot shape")
    }

    pub fn matrix_mut<'a>(&self, theta: &'a mut [f64]) -> ArrayViewMut2<'a, f64> {
        ArrayViewMut2::from_shape((self.rows, self.cols), &mut theta[self.range()]).expect("slot shape")
    }

    pub fn vector<'a>(&self, theta: &'a [f64]) -> ArrayView1<'a, f64> {
        ArrayView1::from(&theta[self.range()])
    }

    pub fn vector_mut<'a>(&self, theta: &'a mut [f64]) -> ArrayViewMut1<'a, f64> {
        ArrayViewMut1::from(&mut theta[self.range()])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamedSlot {
    pub name: String,
    #[serde(flatten)]
    pub slot: Slot,
}

/// Stable index map from parameter names to ranges of the flat vector.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    entries: Vec<NamedSlot>,
    total: usize,
}

impl ParamLayout {
    pub fn alloc(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> Slot {
        let slot = Slot {
            offset: self.total,
            rows,
            cols,
        };
        self.total += slot.len();
        self.entries.push(NamedSlot {
            name: name.into(),
            slot,
        });
        slot
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn entries(&self) -> &[NamedSlot] {
        &self.entries
    }

    pub fn find(&self, name: &str) -> Option<Slot> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.slot)
    }
}
