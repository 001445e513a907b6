export * from "./grid.js";
export * from "./edits.js";
export * from "./session.js";
export * from "./api.js";
export * from "./splat.js";
export * from "./render.js";
export * from "./generation.js";
export * from "./layers.js";
