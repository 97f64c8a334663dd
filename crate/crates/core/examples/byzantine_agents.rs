//! How each attack strategy scores the same honest and malicious submissions.

use std::collections::BTreeSet;

use blocks_sim::agents::{Agent, AgentSpec, QualityModel, Role, Strategy};
use blocks_sim::types::NodeId;

fn main() {
    let members: BTreeSet<NodeId> = ["m00".into(), "m01".into()].into();
    let targets: BTreeSet<NodeId> = ["s01".into()].into();
    let strategies = [
        ("honest", Strategy::Honest),
        ("self_promotion", Strategy::SelfPromotion),
        ("collusion", Strategy::Collusion { group_id: 0, members }),
        ("slandering", Strategy::Slandering { targets }),
    ];
    for (i, (name, strategy)) in strategies.into_iter().enumerate() {
        let spec = AgentSpec {
            node_id: "m00".into(),
            role: Role::Validator,
            strategy,
            rng_stream: Role::Validator.stream(i as u64),
        };
        let mut agent = Agent::new(spec, QualityModel::default(), 42);
        let honest = agent.validate(&"s01".into(), 0.85);
        let own = agent.validate(&"m00".into(), 0.2);
        let ally = agent.validate(&"m01".into(), 0.2);
        println!("{name:>15}: honest s01 {honest:.2}, itself {own:.2}, ally m01 {ally:.2}");
    }
}
