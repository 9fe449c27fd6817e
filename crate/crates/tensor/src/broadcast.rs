//! Numpy-style broadcasting helpers.

use crate::error::{shape_err, Result};

/// Result shape of broadcasting `a` against `b`.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(shape_err(op, format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

/// How flat output indices map back to flat input indices.
#[derive(Debug, Clone)]
pub enum IndexMap {
    Same,
    /// Input is a (leading-ones stripped) suffix of the output shape.
    Modulo(usize),
    General(Vec<usize>),
}

impl IndexMap {
    pub fn new(op: &'static str, input: &[usize], output: &[usize]) -> Result<Self> {
        if input == output {
            return Ok(IndexMap::Same);
        }
        if input.len() > output.len() {
            return Err(shape_err(op, format!("cannot broadcast {input:?} to {output:?}")));
        }
        let offset = output.len() - input.len();
        for (i, &d) in input.iter().enumerate() {
            if d != 1 && d != output[offset + i] {
                return Err(shape_err(op, format!("cannot broadcast {input:?} to {output:?}")));
            }
        }
        let stripped: Vec<usize> = input.iter().copied().skip_while(|&d| d == 1).collect();
        if output.ends_with(&stripped) {
            return Ok(IndexMap::Modulo(stripped.iter().product::<usize>().max(1)));
        }
        // General case: walk output coordinates, zeroing broadcast axes.
        let n: usize = output.iter().product();
        let mut in_strides = vec![0usize; output.len()];
        let mut acc = 1;
        for i in (0..input.len()).rev() {
            in_strides[offset + i] = if input[i] == 1 { 0 } else { acc };
            acc *= input[i];
        }
        let mut map = Vec::with_capacity(n);
        let mut coord = vec![0usize; output.len()];
        for _ in 0..n {
            map.push(coord.iter().zip(&in_strides).map(|(c, s)| c * s).sum());
            for ax in (0..output.len()).rev() {
                coord[ax] += 1;
                if coord[ax] < output[ax] {
                    break;
                }
                coord[ax] = 0;
            }
        }
        Ok(IndexMap::General(map))
    }

    #[inline]
    pub fn get(&self, i: usize) -> usize {
        match self {
            IndexMap::Same => i,
            IndexMap::Modulo(n) => i % n,
            IndexMap::General(m) => m[i],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes() {
        assert_eq!(broadcast_shape("t", &[3, 4], &[4]).unwrap(), vec![3, 4]);
        assert_eq!(broadcast_shape("t", &[3, 1], &[1, 4]).unwrap(), vec![3, 4]);
        assert!(broadcast_shape("t", &[3, 2], &[3]).is_err());
    }

    #[test]
    fn column_map() {
        let m = IndexMap::new("t", &[2, 1], &[2, 3]).unwrap();
        let got: Vec<usize> = (0..6).map(|i| m.get(i)).collect();
        assert_eq!(got, vec![0, 0, 0, 1, 1, 1]);
        let m = IndexMap::new("t", &[3], &[2, 3]).unwrap();
        assert!(matches!(m, IndexMap::Modulo(3)));
    }
}
