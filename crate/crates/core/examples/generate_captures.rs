//! Regenerates the bundled Clear-like capture files under `data/captures/`.
//!
//! cargo run -p fdvv-core --example generate_captures

use std::path::PathBuf;

use fdvv_core::synth::{clear_like, protocol_captures, round_session};

const SEED: u64 = 11;

fn main() -> std::io::Result<()> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/captures");
    std::fs::create_dir_all(&dir)?;
    for session in protocol_captures(&clear_like(), SEED) {
        let session = round_session(&session, 3);
        let name = format!("{}_{}.json", session.meta.button_id, session.meta.nominal_velocity_mm_s as u32);
        std::fs::write(dir.join(&name), session.to_json())?;
        println!("{name}: {} mcu, {} mocap", session.mcu.len(), session.mocap.len());
    }
    Ok(())
}
