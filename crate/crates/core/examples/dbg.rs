use cutflow_core::*;
use std::collections::BTreeMap;
fn main() {
    let fix = fixtures::scalar_chain();
    let site = xform::match_kind(xform::XformKind::TaskletFusion, &fix.program)[0].clone();
    let (_, change) = xform::apply(&site, &fix.program).unwrap();
    let cutout = cutout::extract(&fix.program, &change).unwrap();
    println!("cutout inputs: {:?}", cutout.input_configuration.iter().map(|(n,_)|n).collect::<Vec<_>>());
    println!("cutout origins: {:?}", cutout.origin_nodes);
    for s in &fix.program.states { for n in &s.nodes { println!("  {} {:?} scope={:?}", n.id, n.kind, n.scope); } }
    let net = mincut::prepare(&fix.program, &cutout, &BTreeMap::new()).unwrap();
    println!("{}", mincut::network_dot(&net));
    let result = mincut::solve(&fix.program, &cutout, &BTreeMap::new()).unwrap();
    println!("flow={} ext={:?} won={} old={} new={}", result.flow, result.extension, result.extended_won, result.old_input_volume, result.new_input_volume);
    println!("new inputs: {:?}", result.new_input_configuration.iter().map(|(n,_)|n).collect::<Vec<_>>());
}
