use crate::error::{Error, Result};
use crate::numerics::Var;

/// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
pub fn cross_entropy<'a>(logits: Var<'a>, targets: &[usize]) -> Result<Var<'a>> {
    let (rows, classes) = (logits.rows(), logits.cols());
    if rows != targets.len() {
        return Err(Error::contract(format!(
            "cross_entropy: {rows} logit rows but {} targets",
            targets.len()
        )));
    }
    if rows == 0 {
        return Err(Error::contract("cross_entropy over zero rows"));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
        return Err(Error::data(format!("target {bad} outside {classes} classes")));
    }
    let picks: Vec<usize> = targets.iter().enumerate().map(|(i, &t)| i * classes + t).collect();
    Ok(logits.log_softmax()?.gather_flat(&picks)?.mean().scale(-1.0))
}

/// Sum over rows of `-sum_j log softmax(logits_i)[bag_ij]`, divided by the
/// number of rows with a non-empty bag. Bag entries count with multiplicity.
pub fn bag_of_words<'a>(logits: Var<'a>, bags: &[Vec<usize>]) -> Result<Var<'a>> {
    let (rows, vocab) = (logits.rows(), logits.cols());
    if rows != bags.len() {
        return Err(Error::contract(format!(
            "bag_of_words: {rows} logit rows but {} bags",
            bags.len()
        )));
    }
    let mut picks = Vec::new();
    let mut supervised = 0usize;
    for (i, bag) in bags.iter().enumerate() {
        if !bag.is_empty() {
            supervised += 1;
        }
        for &k in bag {
            if k >= vocab {
                return Err(Error::data(format!("keyword id {k} outside vocabulary of {vocab}")));
            }
            picks.push(i * vocab + k);
        }
    }
    if supervised == 0 {
        return Err(Error::contract("bag_of_words with no keywords"));
    }
    Ok(logits
        .log_softmax()?
        .gather_flat(&picks)?
        .sum()
        .scale(-1.0 / supervised as f64))
}
