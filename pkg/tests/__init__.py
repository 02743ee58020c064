# evortho tests
