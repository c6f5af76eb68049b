//! Pairing prototypes with query features.
//!
//! The class-specific input tiles the foreground prototype over the query
//! grid. The class-agnostic input writes every background region's own
//! prototype over that region and one randomly chosen background prototype
//! over the whole foreground. Both are concatenated with the query features
//! along channels.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensorcore::{BinaryMask, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    ClassSpecific,
    ClassAgnostic,
}

/// A fused `[h, w, 2c]` comparison input and its target mask.
#[derive(Clone, Debug)]
pub struct AlignedInput {
    pub fused: Var,
    pub supervision: BinaryMask,
    pub branch: Branch,
}

/// Tiles a foreground prototype over an `h × w` grid.
pub fn expand_fg(tape: &mut Tape, prototype: Var, h: usize, w: usize) -> Result<Var> {
    tape.expand(prototype, h, w)
}

/// Result of [`expand_bg`]: the expanded map and which prototype filled the
/// foreground.
#[derive(Clone, Copy, Debug)]
pub struct BackgroundExpansion {
    pub expanded: Var,
    pub foreground_choice: usize,
}

/// Fills each background region with its prototype and the foreground with a
/// single prototype drawn uniformly from `prototypes`.
pub fn expand_bg<R: Rng + ?Sized>(
    tape: &mut Tape,
    prototypes: &[Var],
    masks: &[BinaryMask],
    fg_mask: &BinaryMask,
    rng: &mut R,
) -> Result<BackgroundExpansion> {
    if prototypes.is_empty() {
        return Err(Error::NoBackground);
    }
    if prototypes.len() != masks.len() {
        return Err(Error::shape(format!(
            "{} prototypes for {} region masks",
            prototypes.len(),
            masks.len()
        )));
    }
    let (h, w) = fg_mask.dims();
    let choice = rng.random_range(0..prototypes.len());
    let mut assignment = Vec::with_capacity(h * w);
    for p in 0..h * w {
        let mut region = None;
        for (k, m) in masks.iter().enumerate() {
            if m.dims() != (h, w) {
                return Err(Error::shape("region mask shape differs from foreground mask"));
            }
            if m.as_slice()[p] {
                if region.is_some() || fg_mask.as_slice()[p] {
                    return Err(Error::shape(format!("pixel {p} is claimed by more than one region")));
                }
                region = Some(k);
            }
        }
        let k = match region {
            Some(k) => k,
            None if fg_mask.as_slice()[p] => choice,
            None => return Err(Error::shape(format!("pixel {p} belongs to no region"))),
        };
        assignment.push(k);
    }
    let expanded = tape.expand_regions(prototypes, &assignment, h, w)?;
    Ok(BackgroundExpansion {
        expanded,
        foreground_choice: choice,
    })
}

/// Concatenates an expanded prototype map with the query features.
///
/// `query_mask` is the query foreground at feature resolution; the
/// class-agnostic branch is supervised with its complement.
pub fn build_pair(
    tape: &mut Tape,
    expanded: Var,
    query_features: Var,
    query_mask: &BinaryMask,
    branch: Branch,
) -> Result<AlignedInput> {
    let (h, w, ce) = tape.value(expanded).dims3()?;
    let (hq, wq, cq) = tape.value(query_features).dims3()?;
    if (h, w, ce) != (hq, wq, cq) || query_mask.dims() != (h, w) {
        return Err(Error::shape(format!(
            "expanded {:?}, query {:?}, mask {:?} disagree",
            (h, w, ce),
            (hq, wq, cq),
            query_mask.dims()
        )));
    }
    let fused = tape.concat_channels(expanded, query_features)?;
    let supervision = match branch {
        Branch::ClassSpecific => query_mask.clone(),
        Branch::ClassAgnostic => query_mask.complement(),
    };
    Ok(AlignedInput {
        fused,
        supervision,
        branch,
    })
}
