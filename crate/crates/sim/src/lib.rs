//! Synthetic box-world scenes: rendering, benchmark generation and
//! closed-loop exploration.

pub mod explore;
pub mod generate;
pub mod render;
pub mod scene;

pub use explore::{explore, ExploreError, ExploreOptions, ExploreOutcome, ExploreReport, Explorer, ValueKind};
pub use generate::{annotate, generate_dataset, GenerateError, GenerateOptions, GenerateSummary};
pub use render::{render_frame, render_view};
pub use scene::{ground_truth_location, Aabb, Scene, SceneError};

/// Scene scripts shipped with the crate, by name.
pub const BUNDLED_SCENES: &[(&str, &str)] = &[
    ("dynamic", include_str!("../scenes/dynamic.toml")),
    ("adversarial", include_str!("../scenes/adversarial.toml")),
    ("studio", include_str!("../scenes/studio.toml")),
    ("l_room", include_str!("../scenes/l_room.toml")),
    ("two_rooms", include_str!("../scenes/two_rooms.toml")),
    ("two_round", include_str!("../scenes/two_round.toml")),
    ("empty", include_str!("../scenes/empty.toml")),
];

pub fn bundled_scene(name: &str) -> Option<Scene> {
    BUNDLED_SCENES
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| Scene::parse(text).expect("bundled scenes are valid"))
}
