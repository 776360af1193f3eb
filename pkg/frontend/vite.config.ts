import { defineConfig } from "vitest/config";

export default defineConfig({
  server: {
    proxy: {
      "/api": "http://127.0.0.1:8008",
    },
  },
  test: {
    environment: "node",
  },
});
