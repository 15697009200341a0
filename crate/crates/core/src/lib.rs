pub mod atmosphere;
pub mod coords;
pub mod ephemeris;
pub mod eval;
pub mod gnss;
pub mod odometry;
pub mod rinex;
pub mod sim;
pub mod solver;
pub mod spp;
pub mod tdcp;
pub mod time;
