//! Order-independent floating point reduction.
//!
//! Gradients and objectives are summed over sequence clusters that may be
//! grouped differently between runs. [`ExactSum`] keeps the running sum as a
//! list of non-overlapping partials (Shewchuk's expansion arithmetic) and rounds
//! once at the end, so the result is the correctly rounded exact sum and does
//! not depend on how the terms were grouped or ordered.

use crate::scalar::Real;

#[derive(Debug, Clone, Default)]
pub struct ExactSum<T> {
    partials: Vec<T>,
    special: Option<T>,
}

impl<T: Real> ExactSum<T> {
    pub fn new() -> Self {
        Self {
            partials: Vec::new(),
            special: None,
        }
    }

    pub fn add(&mut self, value: T) {
        if !value.is_finite() {
            self.special = Some(match self.special {
                Some(s) => s + value,
                None => value,
            });
            return;
        }
        let mut x = value;
        let mut kept = 0;
        for j in 0..self.partials.len() {
            let mut y = self.partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != T::zero() {
                self.partials[kept] = lo;
                kept += 1;
            }
            x = hi;
        }
        self.partials.truncate(kept);
        self.partials.push(x);
    }

    pub fn merge(&mut self, other: &ExactSum<T>) {
        for &p in &other.partials {
            self.add(p);
        }
        if let Some(s) = other.special {
            self.add(s);
        }
    }

    /// Correctly rounded value of the accumulated sum.
    pub fn value(&self) -> T {
        if let Some(s) = self.special {
            return s;
        }
        let p = &self.partials;
        let mut n = p.len();
        if n == 0 {
            return T::zero();
        }
        n -= 1;
        let mut hi = p[n];
        let mut lo = T::zero();
        while n > 0 {
            let x = hi;
            n -= 1;
            let y = p[n];
            hi = x + y;
            let yr = hi - x;
            lo = y - yr;
            if lo != T::zero() {
                break;
            }
        }
        // Half-way case: the rounding of hi must see the sign of the remainder.
        if n > 0
            && ((lo < T::zero() && p[n - 1] < T::zero())
                || (lo > T::zero() && p[n - 1] > T::zero()))
        {
            let y = lo + lo;
            let x = hi + y;
            let yr = x - hi;
            if y == yr {
                hi = x;
            }
        }
        hi
    }
}

impl<T: Real> FromIterator<T> for ExactSum<T> {
    fn from_iter<I: IntoIterator<Item = T>>(iter: I) -> Self {
        let mut s = ExactSum::new();
        for v in iter {
            s.add(v);
        }
        s
    }
}

/// A vector of exact accumulators of fixed length.
#[derive(Debug, Clone)]
pub struct ExactVec<T> {
    slots: Vec<ExactSum<T>>,
}

impl<T: Real> ExactVec<T> {
    pub fn zeros(len: usize) -> Self {
        Self {
            slots: vec![ExactSum::new(); len],
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn add_at(&mut self, index: usize, value: T) {
        self.slots[index].add(value);
    }

    pub fn add_slice(&mut self, values: &[T]) {
        for (s, &v) in self.slots.iter_mut().zip(values) {
            if v != T::zero() {
                s.add(v);
            }
        }
    }

    pub fn merge(&mut self, other: &ExactVec<T>) {
        for (s, o) in self.slots.iter_mut().zip(&other.slots) {
            s.merge(o);
        }
    }

    pub fn values(&self) -> Vec<T> {
        self.slots.iter().map(ExactSum::value).collect()
    }
}
