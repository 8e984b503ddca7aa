#![allow(dead_code)]

use std::path::Path;

use exo_core::calibration::{ticks_for_pose, CalibrationRecord};
use exo_core::config::{default_arms, default_capture};
use exo_core::model::default_resolution_rad;
use exo_core::scripted::scripted_calibration;
use exo_core::sim::WorldConfig;

use exo_service::session::{ClientId, Outgoing, ServiceCore, SessionSetup};
use exo_service::wire::{Body, Hello, Role, WireMessage};

pub fn calibration() -> CalibrationRecord {
    scripted_calibration(&default_arms(), &default_capture(), 1000).unwrap()
}

pub fn core(data_dir: &Path, virtual_time: bool) -> ServiceCore {
    let mut setup = SessionSetup::new(WorldConfig::default_gather(), calibration(), data_dir);
    setup.virtual_time = virtual_time;
    ServiceCore::new(setup).unwrap()
}

/// Encoder ticks for the home pose with every arm joint nudged by `offset` ticks.
pub fn home_ticks(offset: i64) -> Vec<i64> {
    let world = WorldConfig::default_gather();
    let mut ticks = ticks_for_pose(&calibration(), [&world.home.left, &world.home.right], default_resolution_rad());
    for (i, t) in ticks.iter_mut().enumerate() {
        if i % 8 != 7 {
            *t += offset;
        }
    }
    ticks
}

pub fn msg(seq: u64, body: Body) -> WireMessage {
    WireMessage { seq, t: 0, body }
}

pub fn claim(core: &mut ServiceCore, id: ClientId, seq: u64) -> Vec<Outgoing> {
    core.handle_message(id, msg(seq, Body::Hello(Hello::claim(Role::Operator))))
}

pub fn to(out: &[Outgoing], id: ClientId) -> Vec<&WireMessage> {
    out.iter().filter(|o| o.to == id).map(|o| &o.msg).collect()
}

pub fn errors(out: &[Outgoing], id: ClientId) -> Vec<String> {
    to(out, id)
        .into_iter()
        .filter_map(|m| match &m.body {
            Body::Error(e) => Some(e.message.clone()),
            _ => None,
        })
        .collect()
}

pub fn events(out: &[Outgoing], id: ClientId) -> Vec<(String, serde_json::Value)> {
    to(out, id)
        .into_iter()
        .filter_map(|m| match &m.body {
            Body::Event(e) => Some((e.kind.clone(), e.detail.clone())),
            _ => None,
        })
        .collect()
}
