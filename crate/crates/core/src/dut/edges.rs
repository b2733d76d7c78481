//! Static edge-id allocation.

/// A dense block of edge ids indexed by up to three coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Family {
    base: u32,
    dims: [u32; 3],
}

impl Family {
    pub fn len(&self) -> u32 {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn base(&self) -> u32 {
        self.base
    }

    /// Coordinates beyond a dimension are clamped to its last slot.
    pub fn at(&self, a: u32) -> u32 {
        self.at3(a, 0, 0)
    }

    pub fn at2(&self, a: u32, b: u32) -> u32 {
        self.at3(a, b, 0)
    }

    pub fn at3(&self, a: u32, b: u32, c: u32) -> u32 {
        let [da, db, dc] = self.dims;
        let a = a.min(da - 1);
        let b = b.min(db - 1);
        let c = c.min(dc - 1);
        self.base + (a * db + b) * dc + c
    }

    pub fn contains(&self, edge: u32) -> bool {
        edge >= self.base && edge < self.base + self.len()
    }
}

/// Hands out consecutive families.
#[derive(Debug, Default)]
pub struct Allocator {
    next: u32,
}

impl Allocator {
    pub fn family(&mut self, dims: &[u32]) -> Family {
        let mut d = [1u32; 3];
        d[..dims.len()].copy_from_slice(dims);
        let f = Family { base: self.next, dims: d };
        self.next += f.len();
        f
    }

    pub fn total(&self) -> u32 {
        self.next
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn families_are_disjoint_and_dense() {
        let mut a = Allocator::default();
        let f = a.family(&[3, 4]);
        let g = a.family(&[5]);
        assert_eq!(f.len(), 12);
        assert_eq!(g.base(), 12);
        assert_eq!(f.at2(2, 3), 11);
        assert_eq!(f.at2(9, 9), 11);
        assert_eq!(g.at(0), 12);
        assert_eq!(a.total(), 17);
        assert!(!f.contains(12) && g.contains(12));
    }
}
