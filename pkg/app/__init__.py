# evortho: aerial event-camera orthomosaic pipeline
