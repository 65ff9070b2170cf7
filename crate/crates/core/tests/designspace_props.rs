mod common;

use std::collections::BTreeSet;

use common::{config, kernel, KERNELS};
use mpmdse::designspace::{
    merge, DesignSpace, PragmaDirective, PragmaKind, PragmaValue, SLOT_OPEN,
};
use proptest::prelude::*;

fn space_strategy() -> impl Strategy<Value = DesignSpace> {
    prop::collection::vec((0..4usize, 1..5usize), 1..6).prop_map(|dirs| {
        let directives = dirs
            .into_iter()
            .enumerate()
            .map(|(i, (kind, n))| {
                let kind = PragmaKind::ALL[kind];
                let domain = if kind == PragmaKind::Pipeline {
                    [PragmaValue::Off, PragmaValue::On, PragmaValue::Flatten][..n.min(3)].to_vec()
                } else {
                    (0..n).map(|j| PragmaValue::Factor(1 << j)).collect()
                };
                PragmaDirective {
                    name: format!("d{i}"),
                    kind,
                    target: "L0".into(),
                    domain,
                }
            })
            .collect();
        DesignSpace::new(directives).unwrap()
    })
}

proptest! {
    #[test]
    fn enumeration_covers_the_space_once(space in space_strategy()) {
        let size = space.size();
        let all: Vec<_> = space.enumerate(size).collect();
        prop_assert_eq!(all.len() as u128, size);
        let distinct: BTreeSet<_> = all.iter().cloned().collect();
        prop_assert_eq!(distinct.len(), all.len());
        for (i, c) in all.iter().enumerate() {
            space.check(c).unwrap();
            prop_assert_eq!(space.index_of(c), i as u128);
        }
    }

    #[test]
    fn merge_emits_one_pragma_line_per_enabled_directive(k in 0..3usize, i in any::<u128>()) {
        let spec = kernel(KERNELS[k]);
        let cfg = config(&spec, i);
        let text = merge(&cfg, &spec.space, &spec.behavioral()).unwrap();
        let lines = text.lines().filter(|l| l.trim_start().starts_with("#pragma HLS")).count();
        prop_assert_eq!(lines, spec.space.active_directives(&cfg));
        prop_assert!(!text.contains(SLOT_OPEN));
    }
}
