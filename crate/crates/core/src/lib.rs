pub mod attention;
pub mod edge;
pub mod harness;
pub mod m4c;
pub mod objectives;
pub mod params;
pub mod synth;
pub mod tensor;
