use eamm::puppet::*;
fn main() {
    let id = PuppetIdentity::canonical();
    let mut states = vec![
        ("neutral", PuppetState::neutral()),
    ];
    let mut happy = PuppetState::neutral();
    happy.mouth_curl = 0.8; happy.brow_raise = 0.2; happy.mouth_open = 0.5;
    states.push(("happy_open", happy));
    let mut angry = PuppetState::neutral();
    angry.brow_tilt = -0.7; angry.brow_raise = -0.45; angry.mouth_curl = -0.3;
    states.push(("angry", angry));
    let mut surprised = PuppetState::neutral();
    surprised.brow_raise = 0.9; surprised.eye_open = 1.0; surprised.mouth_open = 0.9;
    states.push(("surprised", surprised));
    let mut posed = PuppetState::neutral();
    posed.pose = PoseVec { roll: 0.3, yaw_shear: 0.15, pitch_shear: -0.1, tx: 0.1, ty: -0.1, scale: 1.1 };
    posed.mouth_open = 0.6;
    states.push(("posed", posed));
    for (name, st) in states {
        let img = render(&id, &st, 128, 128).unwrap();
        let mut f = std::fs::File::create(format!("/tmp/puppet_{name}.ppm")).unwrap();
        img.write_ppm(&mut f).unwrap();
        println!("wrote /tmp/puppet_{name}.ppm");
    }
}
