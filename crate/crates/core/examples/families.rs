fn main() {
    let spec = audiocolor::data::SyntheticSceneSpec::default();
    for f in &spec.families {
        let [a, b] = f.hue_ab();
        println!(
            "{:12} {:?} {:?} {:?} {:?} tones {:.0} {:.0}",
            f.name, f.hue_a, f.hue_b, a, b, f.tone_a_hz, f.tone_b_hz
        );
    }
}
