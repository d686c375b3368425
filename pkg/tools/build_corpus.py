"""Regenerate the bundled test corpus (src/d3mes/data/corpus.sdf).

Needs RDKit, which is *not* a dependency of the package itself; the
resulting SDF is committed so the library and its tests never import it.

    python tools/build_corpus.py
"""
from pathlib import Path

from rdkit import Chem
from rdkit.Chem import AllChem

OUT = Path(__file__).resolve().parents[1] / "src" / "d3mes" / "data" / "corpus.sdf"

# Small neutral C/N/O/F molecules, <= 9 heavy atoms, QM9-like.
SMILES = """
C CC CCC CCCC CC(C)C CCCCC CC(C)CC CC(C)(C)C CCCCCC CC(C)CCC CCC(C)CC CC(C)C(C)C
CC(C)(C)CC CCCCCCC CCCCCCCC CCCCCCCCC CC(C)CC(C)C CC(C)(C)C(C)(C)C
C=C CC=C C=CC=C CC=CC C=C(C)C CC#C C#C CC#CC C#CC=C C=CCC=C CC(=C)C=C
C1CC1 C1CCC1 C1CCCC1 C1CCCCC1 C1CCCCCC1 CC1CC1 CC1CCC1 CC1CCCC1 CC1CCCCC1
C1CC1C1CC1 C1CC2CC12 C1CC2CCC12 C12CC(C1)C2 C1CC2CCC1C2 C1CC2CC1C2 C1=CCC1 C1=CCCC1 C1=CCCCC1
CO CCO CCCO CC(C)O CCCCO CC(C)(C)O OCCO OCC(O)CO CC(O)CO CCC(C)O COC CCOC CCOCC COCCO
C=O CC=O CCC=O CC(C)=O CCC(C)=O CC(=O)C(C)=O O=CC=O O=CCC=O CC(=O)CC(C)=O
OC=O CC(=O)O CCC(=O)O COC=O CC(=O)OC CCOC(C)=O OC(=O)C(=O)O CC(O)C(=O)O
C1CO1 CC1CO1 C1COC1 C1CCOC1 C1CCOCC1 C1COCO1 C1COCCO1 O=C1CCC1 O=C1CCCC1 O=C1CCCCC1 O=C1CCO1 O=C1CCCO1
N CN CCN CCCN CC(C)N CNC CN(C)C CCNCC NCCN NCCO CC(N)CO NC=O CNC=O CC(N)=O CN(C)C=O NC(N)=O
C#N CC#N CCC#N N#CC#N N#CCO N#CC=O CC(C)C#N N#CCC#N C=CC#N
C1CN1 CC1CN1 C1CNC1 C1CCNC1 C1CCNCC1 C1CNCCN1 C1COCCN1 O=C1CCN1 O=C1CCCN1 O=C1NCCO1
CC=NO C=NO CN=O N=NC CC=NC CN=C C=NC=O CCN=C=O
F CF CCF FCF FC(F)F FC(F)(F)F CC(F)F CC(F)(F)F OCC(F)(F)F FC(F)C(F)F FCCF CC(C)F FC=O CC(=O)F N#CF FC=C FC(F)=C
FC1CC1 FC1CCC1 FC1CCCC1 OC1CC1 NC1CC1 OC1CCC1 OC1CCCC1 NC1CCCC1 N#CC1CC1 O=CC1CC1 CC1(C)CC1 CC1(O)CC1
c1ccccc1 c1ccncc1 c1ccoc1 c1cc[nH]c1 Cc1ccccc1 Oc1ccccc1 c1cnccn1 Fc1ccccc1
CC(C)(O)C#C CC(O)C#N CC(=O)C#N OC(C#N)C#N CCC(=O)OC CC(C)OC=O CC(C)C=O CCCCC=O CC(C)CO
COCOC COC(C)OC CC(C)(C)OC CCOCCO OCCOCCO COC(C)=O OCC=O OCCC=O CC(O)C=O OCC#C OCC#N
CNCC#N CN(C)C#N NCC#N NCC(N)=O NCC(=O)O NC(=O)C(N)=O CNC(C)=O CC(=O)NC=O NC(=O)CO
CC1CCCO1 CC1CCCN1 CC1COC1 CC1CC(C)C1 CC1CCC(C)C1 CC1(C)CCC1 OC1COC1 NC1COC1 O=C1COC1 O=C1OCCO1
OCC1CC1 NCC1CC1 CC1CC1C CC1CC1O CC1CC1C#N C1CC1C#C C1CC1C=O C1CC1OC C1CC1CO C1CC1NC=O
CCC(F)(F)F FC(F)(F)C#N FC(F)(F)CO FC(F)(F)C=O FC(F)(F)C(=O)O CC(F)(F)C#N OC(F)C(F)(F)F
C1CC12CC2 C1CC2(C1)CC2 C12CC1CC2 C1C2CC1C2 C1CC2OC2C1 C1OC2CC12 O=C1CC2CC12
CC(C)C(C)C(C)C CCC(C)(C)CC CCC(CC)CC CC(C)(C)CCO CCC(C)(C)O CCCC(C)CO
"""


def main() -> None:
    seen: set[str] = set()
    mols = []
    for smi in SMILES.split():
        mol = Chem.MolFromSmiles(smi)
        assert mol is not None, smi
        can = Chem.MolToSmiles(mol)
        if can in seen:
            continue
        assert mol.GetNumHeavyAtoms() <= 9, smi
        seen.add(can)
        Chem.Kekulize(mol, clearAromaticFlags=True)
        molh = Chem.AddHs(mol)
        if AllChem.EmbedMolecule(molh, randomSeed=0xD3) != 0:
            print("embed failed", smi)
            continue
        AllChem.MMFFOptimizeMolecule(molh, maxIters=2000)
        molh.SetProp("_Name", can)
        mols.append(molh)
    with Chem.SDWriter(str(OUT)) as w:
        w.SetKekulize(True)
        for m in mols:
            w.write(m)
    print(f"wrote {len(mols)} molecules to {OUT}")


if __name__ == "__main__":
    main()
