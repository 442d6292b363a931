"""Config-driven experiment orchestration."""
