# Regenerates eval_golden.json with exact rational arithmetic.
import json
from fractions import Fraction as F
gt=[("v1",0,1,10),("v1",0,21,30),("v1",1,40,50),("v2",0,5,12),("v2",1,1,4),("v2",1,30,45)]
props=[("v1",0,1,10,0.9),("v1",0,50,60,0.8),("v1",0,21,35,0.7),("v1",0,3,9,0.6),
       ("v2",0,5,20,0.85),("v2",0,6,12,0.5),
       ("v1",1,44,60,0.95),("v2",1,2,9,0.4),("v2",1,30,60,0.6),("v2",1,31,44,0.3),("v1",1,1,10,0.2),("v1",1,40,50,0.2)]
ths=[F(k,10) for k in range(1,8)]
def tiou(a,b):
    i=max(0,min(a[1],b[1])-max(a[0],b[0])+1); return F(i,(a[1]-a[0]+1)+(b[1]-b[0]+1)-i)
def ap(c,th):
    P=sorted([p for p in props if p[1]==c],key=lambda p:(-p[4],p[2],p[1],p[0],p[3]))
    G=[g for g in gt if g[1]==c]; used=[False]*len(G); tp=0; s=F(0)
    for r,p in enumerate(P):
        best=None
        for i,g in enumerate(G):
            if used[i] or g[0]!=p[0]: continue
            v=tiou((p[2],p[3]),(g[2],g[3]))
            if best is None or v>best[1]: best=(i,v)
        if best and best[1]>=th and best[1]>0:
            used[best[0]]=True; tp+=1; s+=F(tp,r+1)
    return s/len(G)
rows=[]
for th in ths:
    aps=[ap(c,th) for c in (0,1)]
    rows.append({"threshold":float(th),"ap":[float(a) for a in aps],"map":float(sum(aps)/2)})
out={"videos":["v1","v2"],"n_classes":2,
 "ground_truth":[dict(video_id=a,class_id=b,start=c,end=d) for a,b,c,d in gt],
 "proposals":[dict(video_id=a,class_id=b,start=c,end=d,confidence=e) for a,b,c,d,e in props],
 "expected":rows}
json.dump(out,open(__import__("os").path.join(__import__("os").path.dirname(__file__),"eval_golden.json"),"w"),indent=1)
for r in rows: print(r)
