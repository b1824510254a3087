pub mod ccpomdp;
pub mod dynamics;
pub mod intent;
pub mod maneuver;
pub mod pft;
pub mod planner;
pub mod risk;
pub mod road;
pub mod scene;
pub mod sim;
pub mod stn;
pub mod traffic;
