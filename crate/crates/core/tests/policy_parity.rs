use saint::cone::{collect_offline_dataset, ConeConfig, ConeInstance};
use saint::policy::{
    ArConfig, AutoregressivePolicy, FactorizedConfig, FactorizedPolicy, FlatConfig, FlatPolicy,
    Policy, SaintConfig, SaintPolicy,
};
use saint::rl::{train_offline, train_online, Objective, TrainConfig};

fn every_class() -> Vec<Box<dyn Policy>> {
    let cards = vec![2; 4];
    vec![
        Box::new(SaintPolicy::init(SaintConfig::new(cards.clone(), 2), 0).unwrap()),
        Box::new(
            FactorizedPolicy::init(
                FactorizedConfig {
                    cardinalities: cards.clone(),
                    state_dim: 2,
                    hidden: 16,
                },
                0,
            )
            .unwrap(),
        ),
        Box::new(
            AutoregressivePolicy::init(
                ArConfig {
                    cardinalities: cards.clone(),
                    state_dim: 2,
                    hidden: 16,
                },
                0,
            )
            .unwrap(),
        ),
        Box::new(FlatPolicy::init(FlatConfig::new(cards, 2, 16), 0).unwrap()),
    ]
}

#[test]
fn every_objective_runs_on_every_class() {
    let inst = ConeInstance::build(ConeConfig::new(2, 4, 0.25, 2)).unwrap();
    for objective in [Objective::A2c, Objective::Ppo] {
        for mut p in every_class() {
            let before = p.params().clone();
            let cfg = TrainConfig {
                objective,
                max_episodes: Some(5),
                minibatch: 16,
                ..TrainConfig::default()
            };
            let out = train_online(&inst, p.as_mut(), &cfg, &mut |_| Ok(())).unwrap();
            assert_eq!(out.episodes.len(), 5);
            assert!(!out.updates.is_empty());
            let moved = p.params().iter().any(|(n, t)| t != before.get(n).unwrap());
            assert!(moved, "{objective} did not move {}", p.kind());
        }
    }
    let behavior = &every_class()[1];
    let ds = collect_offline_dataset(&inst, behavior.as_ref(), 0.3, 300, 0).unwrap();
    for mut p in every_class() {
        let cfg = TrainConfig {
            objective: Objective::OfflineAwr,
            epochs: 1,
            minibatch: 32,
            ..TrainConfig::default()
        };
        let (_, reports) = train_offline(&ds, p.as_mut(), &cfg, &mut |_| Ok(())).unwrap();
        assert_eq!(reports.len(), 300usize.div_ceil(32));
        assert!(reports.iter().all(|r| r.actor_loss.is_finite()));
    }
}
