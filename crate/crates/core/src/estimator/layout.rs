use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use serde::{Deserialize, Serialize};

/// One named tensor in the flat parameter buffer. Matrices are row-major with
/// shape `[rows, cols]`; vectors have shape `[len]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ParamEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Init {
    /// Uniform in `[-1/√fan_in, 1/√fan_in]`.
    FanIn(usize),
    Uniform(f64),
    Zeros,
    Ones,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Slot {
    offset: usize,
    rows: usize,
    cols: usize,
}

impl Slot {
    fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.rows * self.cols
    }

    pub fn mat<'a>(&self, buf: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.rows, self.cols), &buf[self.range()]).expect("slot shape")
    }

    pub fn mat_mut<'a>(&self, buf: &'a mut [f64]) -> ArrayViewMut2<'a, f64> {
        let r = self.range();
        ArrayViewMut2::from_shape((self.rows, self.cols), &mut buf[r]).expect("slot shape")
    }

    pub fn vec<'a>(&self, buf: &'a [f64]) -> ArrayView1<'a, f64> {
        ArrayView1::from(&buf[self.range()])
    }

    pub fn vec_mut<'a>(&self, buf: &'a mut [f64]) -> ArrayViewMut1<'a, f64> {
        let r = self.range();
        ArrayViewMut1::from(&mut buf[r])
    }
}

/// Declared ordering of every trainable tensor.
#[derive(Debug, Clone, Default)]
pub struct ParamLayout {
    entries: Vec<ParamEntry>,
    inits: Vec<Init>,
    total: usize,
}

impl ParamLayout {
    pub(crate) fn matrix(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        init: Init,
    ) -> Slot {
        self.push(name.into(), vec![rows, cols], rows, cols, init)
    }

    pub(crate) fn vector(&mut self, name: impl Into<String>, len: usize, init: Init) -> Slot {
        self.push(name.into(), vec![len], 1, len, init)
    }

    fn push(
        &mut self,
        name: String,
        shape: Vec<usize>,
        rows: usize,
        cols: usize,
        init: Init,
    ) -> Slot {
        let slot = Slot {
            offset: self.total,
            rows,
            cols,
        };
        self.total += rows * cols;
        self.entries.push(ParamEntry { name, shape });
        self.inits.push(init);
        slot
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub(crate) fn inits(&self) -> &[Init] {
        &self.inits
    }

    /// Total scalar count.
    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    /// Offset range of a named tensor within the flat buffer.
    pub fn range_of(&self, name: &str) -> Option<std::ops::Range<usize>> {
        let mut offset = 0;
        for e in &self.entries {
            if e.name == name {
                return Some(offset..offset + e.numel());
            }
            offset += e.numel();
        }
        None
    }
}
