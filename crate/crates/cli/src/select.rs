//! Partition selections on the command line.
//!
//! A selection is one or more groups separated by `;`. A group is either a
//! comma list of flat indices (`0,5,17`) or, when any item contains `..`,
//! one item per grid dimension, each a half-open range `a..b` or a single
//! index (`0..4,12..16` selects a 4×4 block of a 2-D grid).

use std::collections::BTreeSet;

use anyhow::{bail, Context, Result};

fn parse_index(s: &str) -> Result<usize> {
    s.trim()
        .parse()
        .with_context(|| format!("bad partition index {s:?}"))
}

fn parse_range(s: &str, limit: usize) -> Result<std::ops::Range<usize>> {
    let r = match s.split_once("..") {
        Some((a, b)) => {
            let a = if a.trim().is_empty() { 0 } else { parse_index(a)? };
            let b = if b.trim().is_empty() { limit } else { parse_index(b)? };
            a..b
        }
        None => {
            let i = parse_index(s)?;
            i..i + 1
        }
    };
    if r.start >= r.end || r.end > limit {
        bail!("range {s:?} is empty or exceeds {limit}");
    }
    Ok(r)
}

/// Flat indices selected by `text` on a grid with `factors`, sorted and
/// without duplicates.
pub fn parse_selection(text: &str, factors: &[usize]) -> Result<Vec<usize>> {
    let total: usize = factors.iter().product();
    let mut out = BTreeSet::new();
    for group in text.split(';').map(str::trim).filter(|g| !g.is_empty()) {
        let items: Vec<&str> = group.split(',').collect();
        if items.iter().any(|i| i.contains("..")) {
            if items.len() != factors.len() {
                bail!(
                    "range group {group:?} has {} axes, grid has {}",
                    items.len(),
                    factors.len()
                );
            }
            let ranges = items
                .iter()
                .zip(factors)
                .map(|(s, &c)| parse_range(s, c))
                .collect::<Result<Vec<_>>>()?;
            let mut idx: Vec<usize> = ranges.iter().map(|r| r.start).collect();
            'outer: loop {
                out.insert(idx.iter().zip(factors).fold(0, |f, (&i, &c)| f * c + i));
                for d in (0..idx.len()).rev() {
                    idx[d] += 1;
                    if idx[d] < ranges[d].end {
                        continue 'outer;
                    }
                    idx[d] = ranges[d].start;
                }
                break;
            }
        } else {
            for s in items {
                let i = parse_index(s)?;
                if i >= total {
                    bail!("partition {i} out of range for {total} partitions");
                }
                out.insert(i);
            }
        }
    }
    Ok(out.into_iter().collect())
}

pub fn parse_list(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .with_context(|| format!("bad integer {s:?} in {text:?}"))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lists_and_ranges() {
        assert_eq!(parse_selection("0", &[16, 16]).unwrap(), vec![0]);
        assert_eq!(parse_selection("5,3,5", &[4, 4]).unwrap(), vec![3, 5]);
        let corner = parse_selection("0..4,0..4", &[16, 16]).unwrap();
        assert_eq!(corner.len(), 16);
        assert_eq!(corner[..5], [0, 1, 2, 3, 16]);
        assert_eq!(parse_selection("2,1..3", &[4, 4]).unwrap(), vec![9, 10]);
        assert_eq!(parse_selection("..,3..", &[2, 4]).unwrap(), vec![3, 7]);
        assert_eq!(parse_selection("0; 1..2,0..1", &[2, 2]).unwrap(), vec![0, 2]);
        assert!(parse_selection("", &[2]).unwrap().is_empty());
    }

    #[test]
    fn rejects_bad_selections() {
        assert!(parse_selection("16", &[4, 4]).is_err());
        assert!(parse_selection("0..5,0..1", &[4, 4]).is_err());
        assert!(parse_selection("0..2", &[4, 4]).is_err());
        assert!(parse_selection("3..3,0", &[4, 4]).is_err());
        assert!(parse_selection("x", &[4]).is_err());
    }
}
