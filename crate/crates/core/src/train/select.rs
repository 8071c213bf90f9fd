use crate::error::{Error, Result};

/// Per-instance RD losses of the global models, one entry per β.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceLosses {
    pub name: String,
    pub losses: Vec<f64>,
}

/// One chosen instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub name: String,
    pub average_rank: f64,
    pub percentile: f64,
    pub target: f64,
}

/// Picks `n` instances closest to the percentiles `k / (n + 1)`.
///
/// Instances are ranked by loss for every β (equal losses share the lower
/// rank), ranks are averaged, and an instance's percentile is
/// `(average_rank + 0.5) / count`. For each target the closest unchosen
/// instance wins; ties go to the earlier name.
pub fn select_representative_instances(instances: &[InstanceLosses], n: usize) -> Result<Vec<Selection>> {
    let m = instances.len();
    if n == 0 || m < n {
        return Err(Error::Config(format!("cannot select {n} of {m} instances")));
    }
    let betas = instances[0].losses.len();
    if betas == 0 || instances.iter().any(|i| i.losses.len() != betas) {
        return Err(Error::Config("every instance needs one loss per beta".into()));
    }
    let mut avg = vec![0.0; m];
    for b in 0..betas {
        for i in 0..m {
            let li = instances[i].losses[b];
            let rank = instances.iter().filter(|o| o.losses[b] < li).count();
            avg[i] += rank as f64 / betas as f64;
        }
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        avg[a]
            .total_cmp(&avg[b])
            .then_with(|| instances[a].name.cmp(&instances[b].name))
    });
    let pct = |i: usize| (avg[i] + 0.5) / m as f64;
    let mut taken = vec![false; m];
    let mut out = Vec::with_capacity(n);
    for k in 1..=n {
        let target = k as f64 / (n + 1) as f64;
        let best = order
            .iter()
            .copied()
            .filter(|&i| !taken[i])
            .min_by(|&a, &b| {
                (pct(a) - target)
                    .abs()
                    .total_cmp(&(pct(b) - target).abs())
                    .then_with(|| instances[a].name.cmp(&instances[b].name))
            })
            .expect("enough instances");
        taken[best] = true;
        out.push(Selection {
            name: instances[best].name.clone(),
            average_rank: avg[best],
            percentile: pct(best),
            target,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(losses: &[f64]) -> Vec<InstanceLosses> {
        losses
            .iter()
            .enumerate()
            .map(|(i, &l)| InstanceLosses {
                name: format!("v{i:02}"),
                losses: vec![l],
            })
            .collect()
    }

    #[test]
    fn single_pick_is_the_median() {
        let s = select_representative_instances(&pool(&[5.0, 1.0, 3.0, 4.0, 2.0]), 1).unwrap();
        assert_eq!(s[0].name, "v02");
        assert_eq!(s[0].percentile, 0.5);
    }

    #[test]
    fn identical_losses_pick_first_names() {
        let s = select_representative_instances(&pool(&[1.0; 8]), 3).unwrap();
        let names: Vec<&str> = s.iter().map(|x| x.name.as_str()).collect();
        assert_eq!(names, ["v00", "v01", "v02"]);
    }

    #[test]
    fn ranks_average_over_betas() {
        let inst = vec![
            InstanceLosses { name: "a".into(), losses: vec![1.0, 3.0] },
            InstanceLosses { name: "b".into(), losses: vec![2.0, 1.0] },
            InstanceLosses { name: "c".into(), losses: vec![3.0, 2.0] },
        ];
        let s = select_representative_instances(&inst, 3).unwrap();
        let get = |n: &str| s.iter().find(|x| x.name == n).unwrap().average_rank;
        assert_eq!(get("a"), 1.0);
        assert_eq!(get("b"), 0.5);
        assert_eq!(get("c"), 1.5);
    }

    #[test]
    fn too_few_instances_rejected() {
        assert!(select_representative_instances(&pool(&[1.0, 2.0]), 3).is_err());
    }
}
