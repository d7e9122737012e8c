import { defineConfig } from "vite";

// The protocol fixtures (state machine + message schema) live in the Python
// package; the console imports them directly so both sides share one source.
export default defineConfig({
  server: {
    fs: { allow: ["..", "."] },
  },
  build: {
    outDir: "dist",
  },
});
