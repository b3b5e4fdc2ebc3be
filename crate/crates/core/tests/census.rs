//! The analytic cost model against the parameters a built model registers.

use gather_excite::cost;
use gather_excite::zoo::{ArchSpec, GePlacement, Model};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const ARCHS: [&str; 5] = [
    "cifar-resnet-20",
    "cifar-resnet-164",
    "wrn-16-4",
    "resnet50-narrow",
    "resnet50",
];
const KINDS: [&str; 5] = ["theta-minus", "theta-minus-max", "theta", "theta-plus", "se"];

fn placement_text(kind: &str, extent: &str, stages: &[usize], reduction: Option<usize>) -> String {
    let stages = if stages.is_empty() {
        "all".to_string()
    } else {
        stages.iter().map(|s| format!("stage{s}")).collect::<Vec<_>>().join(",")
    };
    let extent = if kind == "se" { "global" } else { extent };
    let mut text = format!("{kind}:{extent}:{stages}");
    if let (Some(r), "theta-plus" | "se") = (reduction, kind) {
        text += &format!(":r{r}");
    }
    text
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn cost_model_matches_registry(
        a in 0..ARCHS.len(),
        k in 0..KINDS.len(),
        extent in prop::sample::select(vec!["global", "e2", "e4", "e8"]),
        stage_mask in 0u8..8,
        reduction in prop::option::of(prop::sample::select(vec![4usize, 8, 16])),
        seed in any::<u64>(),
    ) {
        let arch = ArchSpec::preset(ARCHS[a]).unwrap();
        let first = arch.stage_indices()[0];
        let stages: Vec<usize> = (0..3).filter(|b| stage_mask & (1 << b) != 0).map(|b| first + b).collect();
        let text = placement_text(KINDS[k], extent, &stages, reduction);
        let p: GePlacement = text.parse().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if p.validate(&arch).is_err() {
            prop_assert!(cost::count(&arch, Some(&p)).is_err());
            prop_assert!(Model::<f32>::build(&arch, Some(&p), &mut rng).is_err());
            return Ok(());
        }
        let model = Model::<f32>::build(&arch, Some(&p), &mut rng).unwrap();
        let report = cost::count(&arch, Some(&p)).unwrap();
        prop_assert_eq!(report.totals.params, model.store.num_scalars() as u64, "{} {}", ARCHS[a], text);
        prop_assert_eq!(report.totals.params, report.layers.iter().map(|l| l.params).sum::<u64>());
        prop_assert_eq!(report.placement, Some(p.to_string()));
    }

    #[test]
    fn ge_never_removes_cost(a in 0..ARCHS.len(), k in 0..KINDS.len(), extent in prop::sample::select(vec!["global", "e2", "e4"])) {
        let arch = ArchSpec::preset(ARCHS[a]).unwrap();
        let base = cost::count(&arch, None).unwrap().totals;
        let p: GePlacement = placement_text(KINDS[k], extent, &[], None).parse().unwrap();
        prop_assume!(p.validate(&arch).is_ok());
        let with = cost::count(&arch, Some(&p)).unwrap().totals;
        prop_assert!(with.params >= base.params);
        prop_assert!(with.macs >= base.macs);
        if KINDS[k].starts_with("theta-minus") {
            prop_assert_eq!(with.params, base.params);
        } else {
            prop_assert!(with.params > base.params);
        }
    }
}

#[test]
fn json_report_round_trips() {
    let arch = ArchSpec::preset("resnet101").unwrap();
    let p: GePlacement = "theta-plus:e8:stage3,stage4".parse().unwrap();
    let report = cost::count(&arch, Some(&p)).unwrap();
    let back: cost::CostReport = serde_json::from_str(&report.to_json()).unwrap();
    assert_eq!(back, report);
}
